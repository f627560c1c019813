#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "graphmesh.hpp"
#include "schedule.hpp"
#include "tensor.hpp"

namespace flowcast {

// Denoiser abstraction consumed by losses and samplers: (x_noised, condition,
// sigma) -> denoised state. Lets analytic oracles stand in for the network.
using DenoiseFn =
    std::function<Tensor(const Tensor& x_noised, const Tensor& condition, double sigma)>;

// Architecture hyperparameters. Defaults are the scaled-down desk dimensions;
// the large-table values stay reachable through config files.
struct DenoiserConfig {
  int state_channels = 1;
  int cond_channels = 1;     // 0 disables the conditioning input entirely
  int pos_dim = 2;
  int hidden = 32;
  int num_heads = 2;
  int fourier_features = 8;  // embedding width is 2x this (sin and cos halves)
  double fourier_scale = 1.0;
  int noise_embed_dim = 32;  // must be even
  int encoder_levels = 1;    // number of pool/unpool stages
  int blocks_per_level = 1;
  int bottleneck_blocks = 2;
  int ffn_mult = 4;
  bool predict_increment = true;  // net models x_next - condition (BFS style)
  double sigma_data = 1.0;

  void validate() const;
};

// FNV-1a over the canonical config serialization; stored in checkpoints and
// stamped on run outputs so artifacts from different configs never mix.
std::uint64_t config_hash(const DenoiserConfig& cfg);

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
};

struct TransformerBlock {
  Linear wq, wk, wv;   // hidden -> hidden, split into heads column-wise
  Linear edge_proj;    // (pos_dim + 1) -> hidden, added to keys' inputs
  Linear ffn1, ffn2;   // hidden -> ffn_mult*hidden -> hidden
  Linear modulation;   // noise_embed_dim -> 6*hidden, zero-init (AdaLN-Zero)
};

struct DenoiserNet {
  DenoiserConfig config;
  Tensor fourier_w;  // [pos_dim, fourier_features], frozen at init
  Linear noise1, noise2;
  Linear input_proj;
  std::vector<std::vector<TransformerBlock>> encoder;  // per level
  std::vector<TransformerBlock> bottleneck;
  std::vector<Linear> fuse;                            // skip fusion, 2*hidden -> hidden
  std::vector<std::vector<TransformerBlock>> decoder;
  Linear out_proj;   // hidden -> state_channels, zero-init
  Linear long_skip;  // raw input columns -> state_channels, learned
};

DenoiserNet make_denoiser(const DenoiserConfig& cfg, Rng& rng);

// All trainable tensors in a fixed order (frozen fourier_w excluded).
std::vector<Tensor> parameters(const DenoiserNet& net);
std::vector<std::pair<std::string, Tensor>> named_parameters(const DenoiserNet& net);

// [sin(2 pi W p) || cos(2 pi W p)] as a constant [N, 2*fourier_features] tensor.
Tensor embed_positions(const DenoiserNet& net, const std::vector<double>& positions,
                       int num_nodes);

// Raw backbone F_theta. x: [N, state_channels]; condition: [N, cond_channels]
// (pass a default Tensor when cond_channels is 0); sigma > 0.
Tensor forward_raw(const DenoiserNet& net, const GraphHierarchy& hier, const Tensor& x,
                   const Tensor& condition, double sigma);

// EDM-preconditioned denoiser D_theta(x; sigma).
Tensor denoise(const DenoiserNet& net, const GraphHierarchy& hier, const Tensor& x,
               const Tensor& condition, double sigma);

// DenoiseFn view of a network; net and hier are captured by reference and
// must outlive the returned callable.
DenoiseFn bind_denoiser(const DenoiserNet& net, const GraphHierarchy& hier);

// Versioned plain-text checkpoint: config line, config hash, every tensor by
// name. Loading verifies the stored hash against the stored config line and,
// in the checked overload, against the caller's expectation.
void save_checkpoint(const std::string& path, const DenoiserNet& net);
DenoiserNet load_checkpoint(const std::string& path);
DenoiserNet load_checkpoint(const std::string& path, std::uint64_t expected_hash);

// x * sigmoid(x), the smooth nonlinearity used by the FFN and embedding MLPs.
Tensor silu(const Tensor& x);
Tensor linear_apply(const Linear& layer, const Tensor& x);

// Conditioning vector e_sigma [1, noise_embed_dim] for a noise level.
Tensor noise_embedding(const DenoiserNet& net, double sigma);

// Introspection: per-edge attention weights [num_edges, heads] a block assigns
// to features h under conditioning e_sigma. Row groups sharing an edge
// destination sum to 1 per head.
Tensor attention_alpha(const TransformerBlock& blk, const Tensor& h, const MeshGraph& g,
                       const Tensor& edge_attr, const Tensor& e_sigma, int heads);

}  // namespace flowcast
