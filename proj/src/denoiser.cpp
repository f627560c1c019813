#include "denoiser.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace flowcast {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

Linear make_linear(int in, int out, Rng& rng, bool zero_init = false) {
  Linear l;
  if (zero_init)
    l.w = Tensor::zeros({in, out});
  else
    l.w = randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  l.b = Tensor::zeros({out});
  l.w.set_requires_grad(true);
  l.b.set_requires_grad(true);
  return l;
}

TransformerBlock make_block(const DenoiserConfig& cfg, Rng& rng) {
  TransformerBlock b;
  b.wq = make_linear(cfg.hidden, cfg.hidden, rng);
  b.wk = make_linear(cfg.hidden, cfg.hidden, rng);
  b.wv = make_linear(cfg.hidden, cfg.hidden, rng);
  b.edge_proj = make_linear(cfg.pos_dim + 1, cfg.hidden, rng);
  b.ffn1 = make_linear(cfg.hidden, cfg.ffn_mult * cfg.hidden, rng);
  b.ffn2 = make_linear(cfg.ffn_mult * cfg.hidden, cfg.hidden, rng);
  b.modulation = make_linear(cfg.noise_embed_dim, 6 * cfg.hidden, rng, /*zero_init=*/true);
  return b;
}

void collect_block(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                   const TransformerBlock& b) {
  auto lin = [&](const char* name, const Linear& l) {
    out.emplace_back(prefix + "." + name + ".w", l.w);
    out.emplace_back(prefix + "." + name + ".b", l.b);
  };
  lin("wq", b.wq);
  lin("wk", b.wk);
  lin("wv", b.wv);
  lin("edge", b.edge_proj);
  lin("ffn1", b.ffn1);
  lin("ffn2", b.ffn2);
  lin("mod", b.modulation);
}

// Trainable tensors plus the frozen Fourier matrix, in checkpoint order.
std::vector<std::pair<std::string, Tensor>> all_tensors(const DenoiserNet& net) {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("fourier_w", net.fourier_w);
  auto lin = [&](const std::string& name, const Linear& l) {
    out.emplace_back(name + ".w", l.w);
    out.emplace_back(name + ".b", l.b);
  };
  lin("noise1", net.noise1);
  lin("noise2", net.noise2);
  lin("input_proj", net.input_proj);
  for (size_t l = 0; l < net.encoder.size(); ++l)
    for (size_t i = 0; i < net.encoder[l].size(); ++i)
      collect_block(out, "enc" + std::to_string(l) + ".b" + std::to_string(i),
                    net.encoder[l][i]);
  for (size_t i = 0; i < net.bottleneck.size(); ++i)
    collect_block(out, "bot.b" + std::to_string(i), net.bottleneck[i]);
  for (size_t l = 0; l < net.decoder.size(); ++l) {
    lin("fuse" + std::to_string(l), net.fuse[l]);
    for (size_t i = 0; i < net.decoder[l].size(); ++i)
      collect_block(out, "dec" + std::to_string(l) + ".b" + std::to_string(i),
                    net.decoder[l][i]);
  }
  lin("out_proj", net.out_proj);
  lin("long_skip", net.long_skip);
  return out;
}

std::string canonical_config_line(const DenoiserConfig& c) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%d %d %d %d %d %d %.17g %d %d %d %d %d %d %.17g",
                c.state_channels, c.cond_channels, c.pos_dim, c.hidden, c.num_heads,
                c.fourier_features, c.fourier_scale, c.noise_embed_dim, c.encoder_levels,
                c.blocks_per_level, c.bottleneck_blocks, c.ffn_mult,
                c.predict_increment ? 1 : 0, c.sigma_data);
  return buf;
}

// Sinusoidal embedding of the scalar noise input c_noise = ln(sigma)/4.
Tensor sinusoidal_embedding(double value, int dim) {
  const int half = dim / 2;
  std::vector<double> v(static_cast<size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(1e4) * static_cast<double>(i) / half);
    v[static_cast<size_t>(i)] = std::sin(value * freq);
    v[static_cast<size_t>(half + i)] = std::cos(value * freq);
  }
  return Tensor::from_data({1, dim}, std::move(v));
}

Tensor modulation_piece(const Tensor& mod, int i, int hdim) {
  return reshape(slice_cols(mod, i * hdim, hdim), {hdim});
}

// Softmax-normalized per-edge attention weights [E, heads] for the already
// modulated features `a`.
Tensor alpha_from(const TransformerBlock& blk, const Tensor& a, const MeshGraph& g,
                  const Tensor& edge_attr, int heads) {
  Tensor q = linear_apply(blk.wq, a);
  Tensor a_src = gather_rows(a, g.edge_src);
  Tensor k = linear_apply(blk.wk, add(a_src, linear_apply(blk.edge_proj, edge_attr)));
  const int head_dim = a.dim(1) / heads;
  Tensor scores = scale(sum_col_blocks(mul(gather_rows(q, g.edge_dst), k), heads),
                        1.0 / std::sqrt(static_cast<double>(head_dim)));
  return segment_softmax(scores, g.edge_dst, g.num_nodes);
}

Tensor block_forward(const TransformerBlock& blk, const Tensor& h_in, const MeshGraph& g,
                     const Tensor& edge_attr, const Tensor& e_sigma, int heads) {
  const int hdim = h_in.dim(1);
  Tensor mod = linear_apply(blk.modulation, e_sigma);  // [1, 6*hidden]
  const Tensor s1 = modulation_piece(mod, 0, hdim), b1 = modulation_piece(mod, 1, hdim);
  const Tensor g1 = modulation_piece(mod, 2, hdim);
  const Tensor s2 = modulation_piece(mod, 3, hdim), b2 = modulation_piece(mod, 4, hdim);
  const Tensor g2 = modulation_piece(mod, 5, hdim);

  Tensor h = h_in;
  if (g.num_edges() > 0) {
    Tensor a = add(mul(layer_norm(h), add_scalar(s1, 1.0)), b1);
    Tensor alpha = alpha_from(blk, a, g, edge_attr, heads);
    Tensor v = linear_apply(blk.wv, gather_rows(a, g.edge_src));
    Tensor attn = segment_sum(mul_col_blocks(v, alpha, heads), g.edge_dst, g.num_nodes);
    h = add(h, mul(attn, g1));
  }
  // nodes without in-edges receive no messages; only the FFN path moves them
  Tensor a2 = add(mul(layer_norm(h), add_scalar(s2, 1.0)), b2);
  Tensor f = linear_apply(blk.ffn2, silu(linear_apply(blk.ffn1, a2)));
  return add(h, mul(f, g2));
}

Tensor edge_attr_tensor(const MeshGraph& g) {
  // undefined for edgeless graphs; block_forward skips attention there
  if (g.num_edges() == 0) return Tensor();
  return Tensor::from_data({g.num_edges(), g.dim + 1}, g.edge_attr);
}

}  // namespace

void DenoiserConfig::validate() const {
  require(state_channels >= 1, "denoiser: state_channels >= 1");
  require(cond_channels >= 0, "denoiser: cond_channels >= 0");
  require(pos_dim >= 1, "denoiser: pos_dim >= 1");
  require(hidden >= 1 && num_heads >= 1 && hidden % num_heads == 0,
          "denoiser: hidden must be a positive multiple of num_heads");
  require(fourier_features >= 1 && fourier_scale > 0.0, "denoiser: bad fourier settings");
  require(noise_embed_dim >= 2 && noise_embed_dim % 2 == 0,
          "denoiser: noise_embed_dim must be even and >= 2");
  require(encoder_levels >= 0, "denoiser: encoder_levels >= 0");
  require(blocks_per_level >= 1, "denoiser: blocks_per_level >= 1");
  require(bottleneck_blocks >= 1, "denoiser: bottleneck_blocks >= 1");
  require(ffn_mult >= 1, "denoiser: ffn_mult >= 1");
  require(sigma_data > 0.0, "denoiser: sigma_data > 0");
}

std::uint64_t config_hash(const DenoiserConfig& cfg) {
  const std::string line = canonical_config_line(cfg);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : line) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

Tensor silu(const Tensor& x) { return mul(x, sigmoid(x)); }

Tensor linear_apply(const Linear& layer, const Tensor& x) {
  return add(matmul(x, layer.w), layer.b);
}

DenoiserNet make_denoiser(const DenoiserConfig& cfg, Rng& rng) {
  cfg.validate();
  DenoiserNet net;
  net.config = cfg;
  net.fourier_w = randn({cfg.pos_dim, cfg.fourier_features}, rng, cfg.fourier_scale);
  net.noise1 = make_linear(cfg.noise_embed_dim, cfg.noise_embed_dim, rng);
  net.noise2 = make_linear(cfg.noise_embed_dim, cfg.noise_embed_dim, rng);
  const int in_cols = cfg.state_channels + cfg.cond_channels + 2 * cfg.fourier_features;
  net.input_proj = make_linear(in_cols, cfg.hidden, rng);
  net.encoder.resize(static_cast<size_t>(cfg.encoder_levels));
  for (auto& level : net.encoder)
    for (int i = 0; i < cfg.blocks_per_level; ++i) level.push_back(make_block(cfg, rng));
  for (int i = 0; i < cfg.bottleneck_blocks; ++i) net.bottleneck.push_back(make_block(cfg, rng));
  net.fuse.resize(static_cast<size_t>(cfg.encoder_levels));
  net.decoder.resize(static_cast<size_t>(cfg.encoder_levels));
  for (int l = 0; l < cfg.encoder_levels; ++l) {
    net.fuse[static_cast<size_t>(l)] = make_linear(2 * cfg.hidden, cfg.hidden, rng);
    for (int i = 0; i < cfg.blocks_per_level; ++i)
      net.decoder[static_cast<size_t>(l)].push_back(make_block(cfg, rng));
  }
  net.out_proj = make_linear(cfg.hidden, cfg.state_channels, rng, /*zero_init=*/true);
  net.long_skip = make_linear(in_cols, cfg.state_channels, rng);
  return net;
}

std::vector<Tensor> parameters(const DenoiserNet& net) {
  std::vector<Tensor> out;
  for (auto& [name, t] : all_tensors(net))
    if (name != "fourier_w") out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Tensor>> named_parameters(const DenoiserNet& net) {
  auto out = all_tensors(net);
  out.erase(out.begin());  // drop the frozen fourier_w entry
  return out;
}

Tensor embed_positions(const DenoiserNet& net, const std::vector<double>& positions,
                       int num_nodes) {
  require(static_cast<int>(positions.size()) == num_nodes * net.config.pos_dim,
          "embed_positions: position buffer size mismatch");
  Tensor p = Tensor::from_data({num_nodes, net.config.pos_dim}, positions);
  Tensor proj = scale(matmul(p, net.fourier_w), kTwoPi);
  return concat_cols(sin(proj), cos(proj));
}

Tensor forward_raw(const DenoiserNet& net, const GraphHierarchy& hier, const Tensor& x,
                   const Tensor& condition, double sigma) {
  const DenoiserConfig& cfg = net.config;
  require(sigma > 0.0, "forward_raw: sigma must be positive");
  require(static_cast<int>(hier.coarse.size()) == cfg.encoder_levels,
          "forward_raw: hierarchy depth does not match encoder_levels");
  require(x.defined() && x.ndim() == 2 && x.dim(0) == hier.fine.num_nodes &&
              x.dim(1) == cfg.state_channels,
          "forward_raw: x must be [num_nodes, state_channels]");
  if (cfg.cond_channels > 0)
    require(condition.defined() && condition.ndim() == 2 &&
                condition.dim(0) == hier.fine.num_nodes &&
                condition.dim(1) == cfg.cond_channels,
            "forward_raw: condition must be [num_nodes, cond_channels]");
  require(hier.fine.dim == cfg.pos_dim, "forward_raw: mesh dimension mismatch");

  Tensor input = cfg.cond_channels > 0 ? concat_cols(x, condition) : x;
  input = concat_cols(input, embed_positions(net, hier.fine.positions, hier.fine.num_nodes));
  Tensor h = linear_apply(net.input_proj, input);
  Tensor e_sigma = noise_embedding(net, sigma);

  auto graph_at = [&](int level) -> const MeshGraph& {
    return level == 0 ? hier.fine : hier.coarse[static_cast<size_t>(level - 1)].graph;
  };
  std::vector<Tensor> eattr(static_cast<size_t>(cfg.encoder_levels) + 1);
  auto edges_at = [&](int level) -> const Tensor& {
    auto& slot = eattr[static_cast<size_t>(level)];
    if (!slot.defined()) slot = edge_attr_tensor(graph_at(level));
    return slot;
  };

  std::vector<Tensor> skips;
  for (int l = 0; l < cfg.encoder_levels; ++l) {
    for (const auto& blk : net.encoder[static_cast<size_t>(l)])
      h = block_forward(blk, h, graph_at(l), edges_at(l), e_sigma, cfg.num_heads);
    skips.push_back(h);
    const auto& lvl = hier.coarse[static_cast<size_t>(l)];
    Tensor inv = Tensor::from_data({lvl.graph.num_nodes}, lvl.inv_count);
    h = mul_rowscale(segment_sum(h, lvl.assignment, lvl.graph.num_nodes), inv);
  }
  for (const auto& blk : net.bottleneck)
    h = block_forward(blk, h, graph_at(cfg.encoder_levels), edges_at(cfg.encoder_levels),
                      e_sigma, cfg.num_heads);
  for (int l = cfg.encoder_levels - 1; l >= 0; --l) {
    h = apply_knn_interp(hier.coarse[static_cast<size_t>(l)].unpool, h);
    h = linear_apply(net.fuse[static_cast<size_t>(l)],
                     concat_cols(h, skips[static_cast<size_t>(l)]));
    for (const auto& blk : net.decoder[static_cast<size_t>(l)])
      h = block_forward(blk, h, graph_at(l), edges_at(l), e_sigma, cfg.num_heads);
  }
  return add(linear_apply(net.out_proj, layer_norm(h)), linear_apply(net.long_skip, input));
}

Tensor attention_alpha(const TransformerBlock& blk, const Tensor& h, const MeshGraph& g,
                       const Tensor& edge_attr, const Tensor& e_sigma, int heads) {
  require(g.num_edges() > 0, "attention_alpha: graph has no edges");
  const int hdim = h.dim(1);
  Tensor mod = linear_apply(blk.modulation, e_sigma);
  Tensor a = add(mul(layer_norm(h), add_scalar(modulation_piece(mod, 0, hdim), 1.0)),
                 modulation_piece(mod, 1, hdim));
  return alpha_from(blk, a, g, edge_attr, heads);
}

Tensor noise_embedding(const DenoiserNet& net, double sigma) {
  const PreconditionCoeffs pc = precondition_coeffs(sigma, net.config.sigma_data);
  return linear_apply(net.noise2,
                      silu(linear_apply(net.noise1, sinusoidal_embedding(
                                                        pc.c_noise, net.config.noise_embed_dim))));
}

Tensor denoise(const DenoiserNet& net, const GraphHierarchy& hier, const Tensor& x,
               const Tensor& condition, double sigma) {
  const PreconditionCoeffs pc = precondition_coeffs(sigma, net.config.sigma_data);
  Tensor f = forward_raw(net, hier, scale(x, pc.c_in), condition, sigma);
  return add(scale(x, pc.c_skip), scale(f, pc.c_out));
}

DenoiseFn bind_denoiser(const DenoiserNet& net, const GraphHierarchy& hier) {
  return [&net, &hier](const Tensor& x, const Tensor& condition, double sigma) {
    return denoise(net, hier, x, condition, sigma);
  };
}

void save_checkpoint(const std::string& path, const DenoiserNet& net) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  std::fprintf(f, "flowcast-ckpt 1\n");
  std::fprintf(f, "config %s\n", canonical_config_line(net.config).c_str());
  std::fprintf(f, "hash %016" PRIx64 "\n", config_hash(net.config));
  for (const auto& [name, t] : all_tensors(net)) {
    std::fprintf(f, "tensor %s %d", name.c_str(), t.ndim());
    for (int d = 0; d < t.ndim(); ++d) std::fprintf(f, " %d", t.dim(d));
    std::fputc('\n', f);
    const auto& v = t.values();
    for (size_t i = 0; i < v.size(); ++i)
      std::fprintf(f, "%s%.17g", i ? " " : "", v[i]);
    std::fputc('\n', f);
  }
  std::fprintf(f, "end\n");
  if (std::fclose(f) != 0) throw std::runtime_error("write failed: " + path);
}

DenoiserNet load_checkpoint(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "r");
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  auto fail = [&](const std::string& why) -> std::runtime_error {
    std::fclose(f);
    return std::runtime_error("checkpoint " + path + ": " + why);
  };
  char tag[32];
  int version = 0;
  if (std::fscanf(f, "%31s %d", tag, &version) != 2 || std::strcmp(tag, "flowcast-ckpt") != 0 ||
      version != 1)
    throw fail("bad header");

  DenoiserConfig cfg;
  int inc = 0;
  if (std::fscanf(f, "%31s", tag) != 1 || std::strcmp(tag, "config") != 0)
    throw fail("missing config line");
  if (std::fscanf(f, "%d %d %d %d %d %d %lf %d %d %d %d %d %d %lf", &cfg.state_channels,
                  &cfg.cond_channels, &cfg.pos_dim, &cfg.hidden, &cfg.num_heads,
                  &cfg.fourier_features, &cfg.fourier_scale, &cfg.noise_embed_dim,
                  &cfg.encoder_levels, &cfg.blocks_per_level, &cfg.bottleneck_blocks,
                  &cfg.ffn_mult, &inc, &cfg.sigma_data) != 14)
    throw fail("malformed config line");
  cfg.predict_increment = inc != 0;

  std::uint64_t stored_hash = 0;
  if (std::fscanf(f, "%31s %" SCNx64, tag, &stored_hash) != 2 || std::strcmp(tag, "hash") != 0)
    throw fail("missing hash line");
  if (stored_hash != config_hash(cfg)) throw fail("config hash mismatch");

  Rng scratch(0);
  DenoiserNet net = make_denoiser(cfg, scratch);
  for (auto& [name, t] : all_tensors(net)) {
    char tname[128];
    int nd = 0;
    if (std::fscanf(f, "%31s %127s %d", tag, tname, &nd) != 3 ||
        std::strcmp(tag, "tensor") != 0 || name != tname || nd != t.ndim())
      throw fail("tensor record mismatch at " + name);
    for (int d = 0; d < nd; ++d) {
      int dim = 0;
      if (std::fscanf(f, "%d", &dim) != 1 || dim != t.dim(d))
        throw fail("tensor shape mismatch at " + name);
    }
    auto& v = t.mutable_values();
    for (double& x : v)
      if (std::fscanf(f, "%lf", &x) != 1) throw fail("short tensor data at " + name);
  }
  if (std::fscanf(f, "%31s", tag) != 1 || std::strcmp(tag, "end") != 0)
    throw fail("missing end marker");
  std::fclose(f);
  return net;
}

DenoiserNet load_checkpoint(const std::string& path, std::uint64_t expected_hash) {
  DenoiserNet net = load_checkpoint(path);
  if (config_hash(net.config) != expected_hash)
    throw std::runtime_error("checkpoint " + path + ": config hash mismatch with run config");
  return net;
}

}  // namespace flowcast
