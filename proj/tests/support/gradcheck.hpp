#pragma once

// Central finite-difference gradient checks over randomly generated graphs,
// one generator per tape op.

#include "fdl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace fdl::testing {

using GraphFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct GraphCase {
  GraphFn build;
  std::vector<Tensor> inputs;
};

struct OpCase {
  std::string name;
  std::function<GraphCase(std::mt19937_64&)> make;
};

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

// Values bounded away from zero, for ops with a kink there.
inline Tensor random_away_from_zero(std::mt19937_64& rng, Shape shape) {
  std::uniform_real_distribution<double> mag(0.1, 1.5);
  std::bernoulli_distribution sign(0.5);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline Shape random_shape(std::mt19937_64& rng) {
  Shape s(pick(rng, 1, 3));
  for (auto& d : s) d = pick(rng, 1, 4);
  return s;
}

// Reduces an op output to a scalar through a fixed random projection so
// that every output element carries a distinct weight.
inline ad::Var project(ad::Tape& tape, ad::Var out, std::mt19937_64& rng) {
  return ad::sum(ad::mul(out, tape.constant(random_tensor(rng, out.shape()))));
}

// Largest relative error ||analytic - numeric|| / (||analytic|| + ||numeric||)
// over the inputs of the graph.
inline double gradcheck(const GraphCase& c, double h = 1e-5) {
  std::vector<Tensor> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& x : c.inputs) vars.push_back(tape.variable(x));
    tape.backward(c.build(tape, vars));
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const auto& g = vars[i].grad();
      analytic.push_back(g ? *g : Tensor::zeros(c.inputs[i].shape()));
    }
  }
  auto eval = [&](const std::vector<Tensor>& inputs) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    return c.build(tape, vars).value().item();
  };
  double worst = 0.0;
  std::vector<Tensor> probe = c.inputs;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    Tensor numeric(probe[i].shape());
    for (std::size_t k = 0; k < probe[i].size(); ++k) {
      const double x = probe[i][k];
      probe[i][k] = x + h;
      const double up = eval(probe);
      probe[i][k] = x - h;
      const double down = eval(probe);
      probe[i][k] = x;
      numeric[k] = (up - down) / (2.0 * h);
    }
    const double denom = analytic[i].norm() + numeric.norm();
    const double diff = (analytic[i].data() - numeric.data()).norm();
    worst = std::max(worst, denom < 1e-12 ? diff : diff / denom);
  }
  return worst;
}

namespace detail {

// Each generator draws the projection weights once so the graph is the same
// function on every evaluation.
inline GraphCase unary(std::mt19937_64& rng, Shape shape, Tensor input,
                       std::function<ad::Var(ad::Var)> op) {
  Tensor w = random_tensor(rng, shape);
  return {[op, w](ad::Tape& t, const std::vector<ad::Var>& v) {
            return ad::sum(ad::mul(op(v[0]), t.constant(w)));
          },
          {std::move(input)}};
}

inline GraphCase binary(std::mt19937_64& rng, std::function<ad::Var(ad::Var, ad::Var)> op) {
  Shape shape = random_shape(rng);
  // One operand in four is a single-element broadcast.
  const int broadcast = static_cast<int>(pick(rng, 0, 3));
  Tensor a = random_tensor(rng, broadcast == 1 ? Shape{1} : shape);
  Tensor b = random_tensor(rng, broadcast == 2 ? Shape{1} : shape);
  Tensor w = random_tensor(rng, shape);
  return {[op, w](ad::Tape& t, const std::vector<ad::Var>& v) {
            return ad::sum(ad::mul(op(v[0], v[1]), t.constant(w)));
          },
          {std::move(a), std::move(b)}};
}

}  // namespace detail

inline std::vector<OpCase> op_cases() {
  using detail::binary;
  using detail::unary;
  std::vector<OpCase> cases;
  cases.push_back({"add", [](auto& rng) { return binary(rng, [](ad::Var a, ad::Var b) { return a + b; }); }});
  cases.push_back({"sub", [](auto& rng) { return binary(rng, [](ad::Var a, ad::Var b) { return a - b; }); }});
  cases.push_back({"mul", [](auto& rng) { return binary(rng, [](ad::Var a, ad::Var b) { return a * b; }); }});
  cases.push_back({"scale", [](auto& rng) {
                     const double f = std::uniform_real_distribution<double>(-3, 3)(rng);
                     Shape s = random_shape(rng);
                     return unary(rng, s, random_tensor(rng, s), [f](ad::Var a) { return ad::scale(a, f); });
                   }});
  cases.push_back({"matmul", [](auto& rng) {
                     const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
                     Tensor w = random_tensor(rng, {m, n});
                     return GraphCase{[w](ad::Tape& t, const std::vector<ad::Var>& v) {
                                        return ad::sum(ad::mul(ad::matmul(v[0], v[1]), t.constant(w)));
                                      },
                                      {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})}};
                   }});
  cases.push_back({"conv2d", [](auto& rng) {
                     const std::size_t n = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
                     const std::size_t kernel = pick(rng, 0, 1) ? 3 : 1;
                     ad::Conv2dOptions o{pick(rng, 1, 2), kernel == 3 ? pick(rng, 0, 1) : 0};
                     const std::size_t hw = pick(rng, kernel, 6);
                     const std::size_t ho = ad::conv_output_extent(hw, kernel, o);
                     Tensor w = random_tensor(rng, {n, cout, ho, ho});
                     return GraphCase{[w, o](ad::Tape& t, const std::vector<ad::Var>& v) {
                                        return ad::sum(ad::mul(ad::conv2d(v[0], v[1], v[2], o), t.constant(w)));
                                      },
                                      {random_tensor(rng, {n, cin, hw, hw}),
                                       random_tensor(rng, {cout, cin, kernel, kernel}), random_tensor(rng, {cout})}};
                   }});
  cases.push_back({"silu", [](auto& rng) {
                     Shape s = random_shape(rng);
                     return unary(rng, s, random_tensor(rng, s, -4, 4), [](ad::Var a) { return ad::silu(a); });
                   }});
  cases.push_back({"sigmoid", [](auto& rng) {
                     Shape s = random_shape(rng);
                     return unary(rng, s, random_tensor(rng, s, -4, 4), [](ad::Var a) { return ad::sigmoid(a); });
                   }});
  cases.push_back({"softplus", [](auto& rng) {
                     Shape s = random_shape(rng);
                     return unary(rng, s, random_tensor(rng, s, -4, 4), [](ad::Var a) { return ad::softplus(a); });
                   }});
  cases.push_back({"abs", [](auto& rng) {
                     Shape s = random_shape(rng);
                     return unary(rng, s, random_away_from_zero(rng, s), [](ad::Var a) { return ad::abs(a); });
                   }});
  cases.push_back({"reshape", [](auto& rng) {
                     const std::size_t a = pick(rng, 1, 4), b = pick(rng, 1, 4);
                     return unary(rng, {b, a}, random_tensor(rng, {a, b}),
                                  [a, b](ad::Var x) { return ad::reshape(x, {b, a}); });
                   }});
  cases.push_back({"concat", [](auto& rng) {
                     const std::size_t rows = pick(rng, 1, 3), c1 = pick(rng, 1, 3), c2 = pick(rng, 1, 3);
                     const std::size_t axis = pick(rng, 0, 1);
                     Shape s1 = axis == 1 ? Shape{rows, c1} : Shape{c1, rows};
                     Shape s2 = axis == 1 ? Shape{rows, c2} : Shape{c2, rows};
                     Shape out = axis == 1 ? Shape{rows, c1 + c2} : Shape{c1 + c2, rows};
                     Tensor w = random_tensor(rng, out);
                     return GraphCase{[w, axis](ad::Tape& t, const std::vector<ad::Var>& v) {
                                        return ad::sum(ad::mul(ad::concat({v[0], v[1]}, axis), t.constant(w)));
                                      },
                                      {random_tensor(rng, s1), random_tensor(rng, s2)}};
                   }});
  cases.push_back({"slice", [](auto& rng) {
                     Shape s = random_shape(rng);
                     const std::size_t axis = pick(rng, 0, s.size() - 1);
                     const std::size_t begin = pick(rng, 0, s[axis] - 1);
                     const std::size_t end = pick(rng, begin + 1, s[axis]);
                     Shape out = s;
                     out[axis] = end - begin;
                     return unary(rng, out, random_tensor(rng, s),
                                  [=](ad::Var x) { return ad::slice(x, axis, begin, end); });
                   }});
  cases.push_back({"mean", [](auto& rng) {
                     Shape s = random_shape(rng);
                     return unary(rng, {1}, random_tensor(rng, s), [](ad::Var x) { return ad::mean(x); });
                   }});
  cases.push_back({"sum", [](auto& rng) {
                     Shape s = random_shape(rng);
                     return unary(rng, {1}, random_tensor(rng, s), [](ad::Var x) { return ad::sum(x); });
                   }});
  // A unit gate is the identity in both directions, so it is checkable.
  cases.push_back({"gate", [](auto& rng) {
                     Shape s = random_shape(rng);
                     return unary(rng, s, random_tensor(rng, s),
                                  [](ad::Var x) { return ad::silu(ad::gate(ad::silu(x), 1.0)); });
                   }});
  return cases;
}

}  // namespace fdl::testing
