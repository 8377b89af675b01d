#include "milsurv/checks.hpp"

#include <functional>

#include "milsurv/heads.hpp"
#include "milsurv/ops.hpp"
#include "milsurv/rng.hpp"
#include "milsurv/survival.hpp"

namespace milsurv {
namespace {

using D = double;
using T = Tensor<D>;

T random(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  T t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// Σ out ⊙ w with a fixed random w, so every output element carries a distinct weight.
T project(Tape<D>& tape, const T& out, Rng& rng) {
  const auto w = random(rng, out.shape());
  return ops::sum(tape, ops::mul(tape, out, w));
}

struct Case {
  std::string name;
  CheckScope scope;
  std::vector<GradCheckInput> inputs;
  std::function<T(Tape<D>&, const std::vector<GradCheckInput>&)> body;
};

}  // namespace

std::string to_string(CheckScope scope) {
  switch (scope) {
    case CheckScope::primitive: return "primitive";
    case CheckScope::block: return "block";
    case CheckScope::head: return "head";
  }
  return "?";
}

std::vector<SuiteEntry> gradcheck_suite(std::uint64_t seed, SuiteTolerances tolerances) {
  Rng rng(seed, 17);
  std::vector<Case> cases;
  auto unary = [&](std::string name, std::function<T(Tape<D>&, const T&)> f, T x) {
    cases.push_back({std::move(name), CheckScope::primitive, {{"x", x}},
                     [f](Tape<D>& tape, const std::vector<GradCheckInput>& in) { return f(tape, in[0].tensor); }});
  };
  auto binary = [&](std::string name, std::function<T(Tape<D>&, const T&, const T&)> f, T a, T b) {
    cases.push_back({std::move(name), CheckScope::primitive, {{"a", a}, {"b", b}},
                     [f](Tape<D>& tape, const std::vector<GradCheckInput>& in) {
                       return f(tape, in[0].tensor, in[1].tensor);
                     }});
  };

  // Each op's output is folded to a scalar by a fixed random projection.
  auto proj = [&](std::function<T(Tape<D>&, const T&)> f) {
    Rng local = rng.split(static_cast<std::uint64_t>(cases.size()) + 1);
    return [f, local](Tape<D>& tape, const T& x) {
      Rng r = local;
      return project(tape, f(tape, x), r);
    };
  };
  auto proj2 = [&](std::function<T(Tape<D>&, const T&, const T&)> f) {
    Rng local = rng.split(static_cast<std::uint64_t>(cases.size()) + 1001);
    return [f, local](Tape<D>& tape, const T& a, const T& b) {
      Rng r = local;
      return project(tape, f(tape, a, b), r);
    };
  };

  binary("matmul", proj2([](Tape<D>& t, const T& a, const T& b) { return ops::matmul(t, a, b); }),
         random(rng, {3, 4}), random(rng, {4, 5}));
  unary("transpose", proj([](Tape<D>& t, const T& x) { return ops::transpose(t, x); }), random(rng, {3, 4}));
  {
    Rng local = rng.split(500);
    cases.push_back({"linear", CheckScope::primitive,
                     {{"x", random(rng, {3, 4})}, {"weight", random(rng, {4, 2})}, {"bias", random(rng, {2})}},
                     [local](Tape<D>& t, const std::vector<GradCheckInput>& in) {
                       Rng r = local;
                       return project(t, ops::linear(t, in[0].tensor, in[1].tensor, in[2].tensor), r);
                     }});
  }
  binary("add", proj2([](Tape<D>& t, const T& a, const T& b) { return ops::add(t, a, b); }), random(rng, {2, 3}),
         random(rng, {2, 3}));
  binary("sub", proj2([](Tape<D>& t, const T& a, const T& b) { return ops::sub(t, a, b); }), random(rng, {2, 3}),
         random(rng, {2, 3}));
  binary("mul", proj2([](Tape<D>& t, const T& a, const T& b) { return ops::mul(t, a, b); }), random(rng, {2, 3}),
         random(rng, {2, 3}));
  unary("affine", proj([](Tape<D>& t, const T& x) { return ops::affine(t, x, 1.7, -0.3); }), random(rng, {2, 3}));
  unary("scaled_identity_minus",
        proj([](Tape<D>& t, const T& x) { return ops::scaled_identity_minus(t, 3.0, x); }), random(rng, {3, 3}));
  unary("relu", proj([](Tape<D>& t, const T& x) { return ops::relu(t, x); }), random(rng, {3, 4}));
  unary("tanh", proj([](Tape<D>& t, const T& x) { return ops::tanh(t, x); }), random(rng, {3, 4}, -2, 2));
  unary("sigmoid", proj([](Tape<D>& t, const T& x) { return ops::sigmoid(t, x); }), random(rng, {3, 4}, -3, 3));
  unary("softmax_rows", proj([](Tape<D>& t, const T& x) { return ops::softmax(t, x, 1); }), random(rng, {3, 4}, -2, 2));
  unary("softmax_cols", proj([](Tape<D>& t, const T& x) { return ops::softmax(t, x, 0); }), random(rng, {4, 3}, -2, 2));
  unary("log", proj([](Tape<D>& t, const T& x) { return ops::log(t, x); }), random(rng, {2, 3}, 0.5, 2.0));
  unary("clamp", proj([](Tape<D>& t, const T& x) { return ops::clamp(t, x, -0.5, 0.5); }), random(rng, {4, 4}, -1, 1));
  unary("reduce_mean", proj([](Tape<D>& t, const T& x) { return ops::reduce(t, x, ops::Reduce::mean); }),
        random(rng, {5, 3}));
  unary("reduce_max", proj([](Tape<D>& t, const T& x) { return ops::reduce(t, x, ops::Reduce::max); }),
        random(rng, {5, 3}));
  unary("sum", [](Tape<D>& t, const T& x) { return ops::sum(t, x); }, random(rng, {2, 3}));
  unary("abs_sum", [](Tape<D>& t, const T& x) { return ops::abs_sum(t, x); }, random(rng, {3, 3}));
  {
    Rng local = rng.split(501);
    cases.push_back({"layer_norm", CheckScope::primitive,
                     {{"x", random(rng, {3, 5}, -2, 2)}, {"gain", random(rng, {5}, 0.5, 1.5)}, {"shift", random(rng, {5})}},
                     [local](Tape<D>& t, const std::vector<GradCheckInput>& in) {
                       Rng r = local;
                       return project(t, ops::layer_norm(t, in[0].tensor, in[1].tensor, in[2].tensor), r);
                     }});
  }
  {
    const Rng mask_rng = rng.split(502);
    unary("dropout", proj([mask_rng](Tape<D>& t, const T& x) {
            Rng r = mask_rng;
            return ops::dropout(t, x, 0.3, r, true);
          }),
          random(rng, {4, 5}));
  }
  binary("concat_rows", proj2([](Tape<D>& t, const T& a, const T& b) {
           const std::vector<T> parts{a, b};
           return ops::concat_rows(t, std::span<const T>(parts));
         }),
         random(rng, {2, 3}), random(rng, {3, 3}));
  binary("concat_cols", proj2([](Tape<D>& t, const T& a, const T& b) {
           const std::vector<T> parts{a, b};
           return ops::concat_cols(t, std::span<const T>(parts));
         }),
         random(rng, {3, 2}), random(rng, {3, 1}));
  unary("gather_rows", proj([](Tape<D>& t, const T& x) { return ops::gather_rows(t, x, {2, 0, 2, 1, 0}); }),
        random(rng, {3, 2}));
  unary("slice_rows", proj([](Tape<D>& t, const T& x) { return ops::slice_rows(t, x, 1, 2); }), random(rng, {4, 3}));
  unary("slice_cols", proj([](Tape<D>& t, const T& x) { return ops::slice_cols(t, x, 1, 2); }), random(rng, {3, 4}));
  unary("element", [](Tape<D>& t, const T& x) { return ops::element(t, x, 4); }, random(rng, {2, 3}));
  unary("cumprod", proj([](Tape<D>& t, const T& x) { return ops::cumprod(t, x); }), random(rng, {2, 4}, 0.2, 1.2));
  unary("pinv_init", proj([](Tape<D>& t, const T& x) { return ops::pinv_init(t, x); }), random(rng, {4, 4}));
  binary("depthwise_conv1d",
         proj2([](Tape<D>& t, const T& x, const T& w) { return ops::depthwise_conv1d(t, x, w, 2); }),
         random(rng, {6, 4}), random(rng, {2, 3}));
  {
    Rng local = rng.split(503);
    cases.push_back({"depthwise_conv2d", CheckScope::primitive,
                     {{"x", random(rng, {9, 2})}, {"weight", random(rng, {2, 9})}, {"bias", random(rng, {2})}},
                     [local](Tape<D>& t, const std::vector<GradCheckInput>& in) {
                       Rng r = local;
                       return project(t, ops::depthwise_conv2d(t, in[0].tensor, 3, in[1].tensor, 3, in[2].tensor), r);
                     }});
  }
  for (int bin = 0; bin < 4; ++bin) {
    for (bool censored : {false, true}) {
      unary("nll_bin" + std::to_string(bin) + (censored ? "_censored" : "_event"),
            [bin, censored](Tape<D>& t, const T& x) { return nll_loss(t, x, bin, censored); },
            random(rng, {1, 4}, -1.5, 1.5));
    }
  }

  // Composite blocks.
  {
    Rng local = rng.split(600);
    auto a = random(rng, {5, 5}, 0.0, 1.0);
    for (std::size_t i = 0; i < 5; ++i) a.values()[i * 5 + i] += 2.0;
    cases.push_back({"iterative_pinv", CheckScope::block, {{"a", a}},
                     [local](Tape<D>& t, const std::vector<GradCheckInput>& in) {
                       Rng r = local;
                       return project(t, iterative_pinv(t, in[0].tensor, 6), r);
                     }});
  }
  for (bool exact : {false, true}) {
    TransMilConfig tc;
    tc.heads = 2;
    tc.head_dim = 4;
    tc.landmarks = 2;
    tc.residual_kernel = 3;
    Rng local = rng.split(exact ? 602 : 601);
    std::vector<GradCheckInput> in{{"x", random(rng, {5, 8})},
                                   {"qkv", random(rng, {8, 24}, -0.5, 0.5)},
                                   {"out_w", random(rng, {8, 8}, -0.5, 0.5)},
                                   {"out_b", random(rng, {8})},
                                   {"residual", random(rng, {2, 3})}};
    cases.push_back({exact ? "exact_attention" : "nystrom_attention", CheckScope::block, in,
                     [local, tc, exact](Tape<D>& t, const std::vector<GradCheckInput>& v) {
                       Rng r = local;
                       const AttentionWeights<D> w{v[1].tensor, v[2].tensor, v[3].tensor, v[4].tensor};
                       const auto out = exact ? exact_attention(t, v[0].tensor, w, tc)
                                              : nystrom_attention(t, v[0].tensor, w, tc);
                       return project(t, out, r);
                     }});
  }

  // Heads end to end through the survival loss.
  std::vector<std::unique_ptr<MilHead<D>>> heads;
  for (auto kind : {HeadKind::mean, HeadKind::max, HeadKind::abmil, HeadKind::transmil}) {
    HeadConfig hc;
    hc.kind = kind;
    hc.input_dim = 16;
    hc.hidden_dim = 8;
    hc.attn_dim = 4;
    hc.bins = 4;
    hc.transmil.heads = 2;
    hc.transmil.head_dim = 4;
    Rng init = rng.split(700 + static_cast<std::uint64_t>(kind));
    heads.push_back(build_head<D>(hc, init));
    const MilHead<D>* head = heads.back().get();
    std::vector<GradCheckInput> in{{"bag", random(rng, {7, 16})}};
    for (const auto& p : head->parameters()) in.push_back({p.name, p.value});
    cases.push_back({to_string(kind), CheckScope::head, in,
                     [head](Tape<D>& t, const std::vector<GradCheckInput>& v) {
                       Rng unused(0);
                       return nll_loss(t, head->forward(t, v[0].tensor, false, unused), 2, false);
                     }});
  }

  std::vector<SuiteEntry> out;
  for (auto& c : cases) {
    const double tol = c.scope == CheckScope::primitive ? tolerances.primitive : tolerances.head;
    auto inputs = c.inputs;
    auto body = c.body;
    auto report = grad_check([&](Tape<D>& tape) { return body(tape, inputs); }, c.inputs, 1e-5, tol);
    out.push_back({c.name, c.scope, std::move(report)});
  }
  return out;
}

}  // namespace milsurv
