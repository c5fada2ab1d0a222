#include "fdl/json_io.hpp"

#include <cmath>

namespace fdl::json_io {

ObjectReader::ObjectReader(const Json& object, std::string pointer) : object_(object), pointer_(std::move(pointer)) {
  if (!object_.is_object()) throw ConfigError(pointer_, "expected an object");
}

const Json& ObjectReader::at(const char* key) {
  consumed_.insert(key);
  return object_.at(key);
}

void ObjectReader::finish() const {
  for (const auto& [key, value] : object_.items()) {
    if (!consumed_.count(key)) throw ConfigError(child(key), "unknown key");
  }
}

Json to_json(const SceneSpec& v) {
  return {{"image_size", v.image_size},
          {"object_count", {v.min_objects, v.max_objects}},
          {"class_count", v.class_count},
          {"seed", v.seed},
          {"object_size", {v.min_object_size, v.max_object_size}}};
}

Json to_json(const ModalityProfile& v) {
  return {{"quality", v.quality},
          {"noise_sigma", v.noise_sigma},
          {"contrast", v.contrast},
          {"dropout_prob", v.dropout_prob}};
}

Json to_json(const BackboneConfig& v) {
  return {{"input_channels", v.input_channels},
          {"stem_widths", v.stem_widths},
          {"stage_widths", v.stage_widths},
          {"probe_stage_index", v.probe_stage_index}};
}

Json to_json(const ModelConfig& v) {
  return {{"mode", mode_name(v.mode)},   {"classes", v.classes},       {"class_prior", v.class_prior},
          {"band_scale", v.band_scale},  {"box_unit", v.box_unit},     {"init_gain", v.init_gain},
          {"backbone", to_json(v.backbone)}};
}

Json to_json(const LossWeights& v) {
  return {{"alpha", v.alpha},
          {"beta", v.beta},
          {"gamma", v.gamma},
          {"lambda_box", v.lambda_box},
          {"lambda_cls", v.lambda_cls}};
}

Json to_json(const OptimizerConfig& v) {
  return {{"initial_lr", v.initial_lr}, {"final_lr", v.final_lr},     {"momentum", v.momentum},
          {"weight_decay", v.weight_decay}, {"epochs", v.epochs},   {"batch_size", v.batch_size}};
}

Json to_json(const EvalConfig& v) {
  return {{"score_threshold", v.score_threshold},
          {"nms_iou", v.nms_iou},
          {"max_detections", v.max_detections},
          {"batch_size", v.batch_size}};
}

Json to_json(const route::RoutePlan& v) {
  const std::string name = v.name();
  if (name != "custom") return name;
  Json m = Json::array();
  for (const auto& row : v.pass) m.push_back({row[0], row[1]});
  return m;
}

Json to_json(const theory::GridConfig& v) {
  Json j = {{"min", v.min}, {"max", v.max}, {"step", v.step}, {"biases", v.biases},
            {"crosscheck_tolerance", v.crosscheck_tolerance}};
  if (!std::isnan(v.partner_min)) j["partner_min"] = v.partner_min;
  return j;
}

Json to_json(const EvalResult& v) {
  return {{"per_class_ap50", v.per_class_ap50},
          {"per_class_ap75", v.per_class_ap75},
          {"per_class_ap50_95", v.per_class_ap50_95},
          {"class_present", v.class_present},
          {"mean_ap50", v.mean_ap50},
          {"mean_ap75", v.mean_ap75},
          {"mean_ap50_95", v.mean_ap50_95}};
}

namespace {

template <typename T>
void read_pair(ObjectReader& r, const char* key, T& lo, T& hi) {
  if (!r.has(key)) return;
  const Json& v = r.at(key);
  if (!v.is_array() || v.size() != 2) throw ConfigError(r.child(key), "expected a two-element array");
  try {
    lo = v[0].get<T>();
    hi = v[1].get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(r.child(key), "wrong type");
  }
}

}  // namespace

SceneSpec scene_spec_from(const Json& j, const std::string& pointer) {
  SceneSpec s;
  ObjectReader r(j, pointer);
  r.read("image_size", s.image_size);
  read_pair(r, "object_count", s.min_objects, s.max_objects);
  r.read("class_count", s.class_count);
  r.read("seed", s.seed);
  read_pair(r, "object_size", s.min_object_size, s.max_object_size);
  r.finish();
  validated(pointer, {"image_size", "object_count", "class_count", "object_size"}, [&] { s.validate(); });
  return s;
}

ModalityProfile profile_from(const Json& j, const std::string& pointer) {
  ObjectReader r(j, pointer);
  ModalityProfile p;
  // A bare quality expands to the derived profile; explicit fields override it.
  if (r.has("quality")) {
    double q = 1.0;
    r.read("quality", q);
    validated(pointer, {"quality"}, [&] { p = ModalityProfile::from_quality(q); });
  }
  r.read("noise_sigma", p.noise_sigma);
  r.read("contrast", p.contrast);
  r.read("dropout_prob", p.dropout_prob);
  r.finish();
  validated(pointer, {"quality", "noise_sigma", "contrast", "dropout_prob"}, [&] { p.validate(); });
  return p;
}

BackboneConfig backbone_from(const Json& j, const std::string& pointer) {
  BackboneConfig b;
  ObjectReader r(j, pointer);
  r.read("input_channels", b.input_channels);
  r.read("stem_widths", b.stem_widths);
  r.read("stage_widths", b.stage_widths);
  b.probe_stage_index = b.stage_widths.empty() ? 0 : b.stage_widths.size() - 1;
  r.read("probe_stage_index", b.probe_stage_index);
  r.finish();
  validated(pointer, {"input_channels", "stem_widths", "stage_widths", "probe_stage_index"}, [&] { b.validate(); });
  return b;
}

ModelConfig model_from(const Json& j, const std::string& pointer) {
  ModelConfig m;
  ObjectReader r(j, pointer);
  if (r.has("mode")) {
    std::string mode;
    r.read("mode", mode);
    validated(pointer + "/mode", {}, [&] { m.mode = parse_mode(mode); });
  }
  r.read("classes", m.classes);
  r.read("class_prior", m.class_prior);
  r.read("band_scale", m.band_scale);
  r.read("box_unit", m.box_unit);
  r.read("init_gain", m.init_gain);
  if (r.has("backbone")) m.backbone = backbone_from(r.at("backbone"), r.child("backbone"));
  r.finish();
  validated(pointer, {"classes", "class_prior", "band_scale", "box_unit", "init_gain"}, [&] { m.validate(); });
  return m;
}

LossWeights loss_from(const Json& j, const std::string& pointer) {
  LossWeights w;
  ObjectReader r(j, pointer);
  r.read("alpha", w.alpha);
  r.read("beta", w.beta);
  r.read("gamma", w.gamma);
  r.read("lambda_box", w.lambda_box);
  r.read("lambda_cls", w.lambda_cls);
  r.finish();
  validated(pointer, {"alpha", "beta", "gamma", "lambda_box", "lambda_cls"}, [&] { w.validate(); });
  return w;
}

OptimizerConfig optimizer_from(const Json& j, const std::string& pointer) {
  OptimizerConfig o;
  ObjectReader r(j, pointer);
  r.read("initial_lr", o.initial_lr);
  r.read("final_lr", o.final_lr);
  r.read("momentum", o.momentum);
  r.read("weight_decay", o.weight_decay);
  r.read("epochs", o.epochs);
  r.read("batch_size", o.batch_size);
  r.finish();
  validated(pointer, {"initial_lr", "final_lr", "momentum", "weight_decay", "epochs", "batch_size"},
            [&] { o.validate(); });
  return o;
}

EvalConfig eval_from(const Json& j, const std::string& pointer) {
  EvalConfig e;
  ObjectReader r(j, pointer);
  r.read("score_threshold", e.score_threshold);
  r.read("nms_iou", e.nms_iou);
  r.read("max_detections", e.max_detections);
  r.read("batch_size", e.batch_size);
  r.finish();
  validated(pointer, {"score_threshold", "nms_iou", "max_detections", "batch_size"}, [&] { e.validate(); });
  return e;
}

route::RoutePlan route_from(const Json& j, const std::string& pointer) {
  if (j.is_string()) {
    route::RoutePlan p;
    validated(pointer, {}, [&] { p = route::RoutePlan::preset(j.get<std::string>()); });
    return p;
  }
  if (!j.is_array() || j.size() != route::kOutputs) {
    throw ConfigError(pointer, "expected a preset name or a 3x2 matrix");
  }
  route::RoutePlan p;
  for (int row = 0; row < route::kOutputs; ++row) {
    const Json& r = j[static_cast<std::size_t>(row)];
    const std::string rp = pointer + "/" + std::to_string(row);
    if (!r.is_array() || r.size() != route::kInputs) throw ConfigError(rp, "expected two entries");
    for (int col = 0; col < route::kInputs; ++col) {
      const Json& v = r[static_cast<std::size_t>(col)];
      if (!v.is_number_integer() || (v.get<int>() != 0 && v.get<int>() != 1)) {
        throw ConfigError(rp + "/" + std::to_string(col), "entries must be 0 or 1");
      }
      p.pass[row][col] = v.get<int>();
    }
  }
  return p;
}

theory::GridConfig grid_from(const Json& j, const std::string& pointer) {
  theory::GridConfig g;
  ObjectReader r(j, pointer);
  r.read("min", g.min);
  r.read("max", g.max);
  r.read("step", g.step);
  r.read("partner_min", g.partner_min);
  r.read("biases", g.biases);
  r.read("crosscheck_tolerance", g.crosscheck_tolerance);
  r.finish();
  validated(pointer, {"step", "partner_min", "biases", "crosscheck_tolerance"}, [&] { g.validate(); });
  return g;
}

}  // namespace fdl::json_io
