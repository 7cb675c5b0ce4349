#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vitkd/ops.hpp"
#include "vitkd/rng.hpp"
#include "vitkd/tensor.hpp"

// Parameterised building blocks shared by the backbone and the generators.
namespace vitkd {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

constexpr float kInitStd = 0.02f;
constexpr float kNormEps = 1e-6f;

Tensor trunc_normal(Shape shape, Rng& rng, float std = kInitStd);

struct Linear {
  Tensor weight;  // [in×out]
  Tensor bias;    // [out]

  static Linear make(std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct Norm {
  Tensor gamma;
  Tensor beta;

  static Norm make(std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, kNormEps); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct Mlp {
  Linear fc1;
  Linear fc2;

  static Mlp make(std::size_t dim, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct MultiHeadAttention {
  Linear q, k, v, proj;
  std::size_t heads = 1;

  struct Output {
    Tensor out;      // [b×t×d]
    Tensor weights;  // [(b·heads)×t_q×t_k], row-stochastic
  };

  static MultiHeadAttention make(std::size_t dim, std::size_t heads, Rng& rng);
  // query [b×t_q×d], key/value [b×t_k×d]. When key_allowed is non-empty it
  // holds b×t_k flags selecting which keys each sample may attend to.
  Output operator()(const Tensor& query, const Tensor& key, const Tensor& value,
                    std::span<const std::uint8_t> key_allowed = {}) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

// Pre-norm transformer layer.
struct EncoderLayer {
  Norm norm1;
  MultiHeadAttention attn;
  Norm norm2;
  Mlp mlp;

  struct Output {
    Tensor y;        // mha_out + FFN(LN(mha_out)); the FFN-out tap
    Tensor mha_out;  // x + MHA(LN(x)); the MHA-out tap
    Tensor attn;     // [(b·heads)×t×t]
  };

  static EncoderLayer make(std::size_t dim, std::size_t heads, std::size_t mlp_hidden, Rng& rng);
  // `pos`, when defined ([t×d]), is added to the normalised query/key input
  // only, keeping the residual stream untouched.
  Output operator()(const Tensor& x, const Tensor& pos = {}) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

}  // namespace vitkd
