#pragma once

// Small layer library on top of the autograd core.

#include <string>
#include <vector>

#include "lddpm/autograd.hpp"

namespace lddpm::nn {

using ag::Var;

struct NamedParam {
  std::string name;
  Var var;
};

using ParamList = std::vector<NamedParam>;

class Module {
 public:
  virtual ~Module() = default;
  /// Appends every trainable tensor under `prefix`.
  virtual void collect(const std::string& prefix, ParamList& out) const = 0;

  ParamList parameters(const std::string& prefix = "") const {
    ParamList out;
    collect(prefix, out);
    return out;
  }
};

Var make_param(Tensor value);

class Conv2d : public Module {
 public:
  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int padding, Rng& rng, bool bias = true);

  Var operator()(const Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const override;
  void zero_init();

  int in_channels() const { return weight.dim(1); }
  int out_channels() const { return weight.dim(0); }

  Var weight;
  Var bias;
  int stride = 1;
  int padding = 0;
};

class Linear : public Module {
 public:
  Linear() = default;
  Linear(int in_f, int out_f, Rng& rng, bool bias = true);

  Var operator()(const Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const override;
  void zero_init();

  Var weight;
  Var bias;
};

class GroupNorm : public Module {
 public:
  GroupNorm() = default;
  explicit GroupNorm(int channels, int max_groups = 8);

  Var operator()(const Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const override;

  int groups = 1;
  Var gamma;
  Var beta;
};

/// Largest divisor of `channels` not exceeding `max_groups`.
int pick_groups(int channels, int max_groups);

/// Sinusoidal step embedding, [steps.size(), dim]. Every component lies in [-1, 1].
Tensor sinusoidal_embedding(const std::vector<int>& steps, int dim);

/// Two-layer MLP with SiLU between.
class Mlp : public Module {
 public:
  Mlp() = default;
  Mlp(int in_f, int hidden, int out_f, Rng& rng);
  Var operator()(const Var& x) const;
  void collect(const std::string& prefix, ParamList& out) const override;

  Linear fc1;
  Linear fc2;
};

/// Turns `steps` into a learned embedding: sinusoid followed by an MLP.
class TimestepEmbedder : public Module {
 public:
  TimestepEmbedder() = default;
  TimestepEmbedder(int sinusoid_dim, int out_dim, Rng& rng);
  Var operator()(const std::vector<int>& steps) const;
  void collect(const std::string& prefix, ParamList& out) const override;

  int sinusoid_dim = 0;
  Mlp mlp;
};

void set_requires_grad(const ParamList& params, bool on);
void zero_grad(const ParamList& params);
std::int64_t count_parameters(const ParamList& params);
/// Copies values between structurally identical parameter lists.
void copy_values(const ParamList& from, const ParamList& to);
/// 64-bit FNV-1a over names and raw float bytes; changes whenever any value changes.
std::uint64_t hash_parameters(const ParamList& params);

}  // namespace lddpm::nn
