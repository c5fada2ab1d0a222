#pragma once

// JSON (de)serialization of the configuration types. Readers reject unknown
// keys and report the JSON pointer of the offending value.

#include "fdl/detector.hpp"
#include "fdl/gradient_theory.hpp"
#include "fdl/metrics.hpp"
#include "fdl/route.hpp"
#include "fdl/synthgen.hpp"
#include "fdl/trainer.hpp"

#include "json.hpp"

#include <initializer_list>
#include <set>
#include <string>

namespace fdl::json_io {

using Json = nlohmann::ordered_json;

// Reads fields from one JSON object and remembers which keys were consumed.
class ObjectReader {
 public:
  ObjectReader(const Json& object, std::string pointer);

  template <typename T>
  void read(const char* key, T& out) {
    if (!object_.contains(key)) return;
    consumed_.insert(key);
    try {
      out = object_.at(key).template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(child(key), "wrong type");
    }
  }

  bool has(const char* key) const { return object_.contains(key); }
  const Json& at(const char* key);
  std::string child(const std::string& key) const { return pointer_ + "/" + key; }
  const std::string& pointer() const { return pointer_; }
  // Throws ConfigError naming the first key that was never read.
  void finish() const;

 private:
  const Json& object_;
  std::string pointer_;
  std::set<std::string> consumed_;
};

// Wraps a validate() call so its message carries the pointer of the object;
// messages that name a field get the field appended to the pointer.
template <typename F>
void validated(const std::string& pointer, std::initializer_list<const char*> fields, F&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    for (const char* f : fields) {
      if (msg.find(f) != std::string::npos) throw ConfigError(pointer + "/" + f, msg);
    }
    throw ConfigError(pointer, msg);
  }
}

Json to_json(const SceneSpec& v);
Json to_json(const ModalityProfile& v);
Json to_json(const BackboneConfig& v);
Json to_json(const ModelConfig& v);
Json to_json(const LossWeights& v);
Json to_json(const OptimizerConfig& v);
Json to_json(const EvalConfig& v);
Json to_json(const route::RoutePlan& v);
Json to_json(const theory::GridConfig& v);
Json to_json(const EvalResult& v);

SceneSpec scene_spec_from(const Json& j, const std::string& pointer);
ModalityProfile profile_from(const Json& j, const std::string& pointer);
BackboneConfig backbone_from(const Json& j, const std::string& pointer);
ModelConfig model_from(const Json& j, const std::string& pointer);
LossWeights loss_from(const Json& j, const std::string& pointer);
OptimizerConfig optimizer_from(const Json& j, const std::string& pointer);
EvalConfig eval_from(const Json& j, const std::string& pointer);
// A preset name or an explicit 3x2 matrix of {0,1}.
route::RoutePlan route_from(const Json& j, const std::string& pointer);
theory::GridConfig grid_from(const Json& j, const std::string& pointer);

}  // namespace fdl::json_io
