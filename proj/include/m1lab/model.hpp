#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "m1lab/ops.hpp"
#include "m1lab/tensor.hpp"

namespace m1lab {

enum class LayerKind { kGlobal, kSwa };

std::string_view layer_kind_name(LayerKind kind);

// Repeating [SWA, SWA, SWA, GLOBAL] of the requested length.
std::vector<LayerKind> desk_layer_pattern(std::size_t n_layers);

struct ModelConfig {
  std::size_t vocab_size = 128;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::vector<LayerKind> layer_pattern = desk_layer_pattern(4);
  std::size_t global_heads = 2;
  std::size_t global_head_dim = 32;
  std::size_t swa_heads = 4;
  std::size_t swa_head_dim = 16;
  std::size_t window_size = 64;
  double rope_base = 1e6;
  // Temporal convolution on K and V; kv_conv = false removes it entirely.
  bool kv_conv = true;
  std::size_t conv_kernel_size = 2;
  std::size_t ffn_hidden = 128;
  // Query heads per KV head. Only the cache accounting uses it.
  std::size_t kv_group_size = 1;
  double norm_eps = 1e-6;

  // Throws a config error naming the first violated invariant.
  void validate() const;

  std::size_t heads(LayerKind kind) const { return kind == LayerKind::kGlobal ? global_heads : swa_heads; }
  std::size_t head_dim(LayerKind kind) const { return kind == LayerKind::kGlobal ? global_head_dim : swa_head_dim; }
  std::size_t attn_width(LayerKind kind) const { return heads(kind) * head_dim(kind); }

  bool operator==(const ModelConfig&) const = default;
};

// key=value text form, one setting per line, keys without a section prefix.
std::map<std::string, std::string> model_config_to_map(const ModelConfig& config);
ModelConfig model_config_from_map(const std::map<std::string, std::string>& values);

struct LayerParams {
  LayerKind kind = LayerKind::kSwa;
  Tensor attn_norm;  // [d]
  Tensor wq, wk, wv;  // [d, heads*head_dim]
  Tensor conv_k, conv_v;  // [conv_kernel_size, heads*head_dim], absent without kv_conv
  Tensor wo;  // [heads*head_dim, d]
  Tensor ffn_norm;  // [d]
  Tensor w_gate, w_up;  // [d, ffn_hidden]
  Tensor w_down;  // [ffn_hidden, d]
};

struct ModelParams {
  Tensor embedding;  // [V, d]
  std::vector<LayerParams> layers;
  Tensor final_norm;  // [d]
  Tensor output;  // [d, V]

  // All parameter tensors in checkpoint order: embedding; per layer attn_norm,
  // wq, wk, wv, conv_k, conv_v (when present), wo, ffn_norm, w_gate, w_up,
  // w_down; final_norm; output.
  std::vector<Tensor> tensors() const;
  std::size_t num_parameters() const;
  ModelParams clone() const;
  void zero_grad();
};

// Closed-form count:
//   2*V*d + d + sum over layers of (2d + 4*d*W + 2*k*W*[kv_conv] + 3*d*ffn_hidden)
// where W = heads*head_dim of that layer's kind and k = conv_kernel_size.
std::size_t parameter_count(const ModelConfig& config);

// Scaled-normal initialisation: std 0.02 for embeddings, projections and the
// output head, 0.02/sqrt(2*n_layers) for the residual projections (wo,
// w_down); norm gains 1; conv kernels start as identity (last tap 1) with
// N(0, 0.02) on the earlier taps.
ModelParams build_model(const ModelConfig& config, std::uint64_t seed);

// mask[i][j] true iff j <= i and i - j < w.
std::vector<std::vector<bool>> sliding_window_mask(std::size_t t, std::size_t w);

// Per-query key ranges for one sequence. With sample ids, a query only sees
// keys from its own sample and positions restart at each sample boundary.
struct SequenceLayout {
  std::vector<std::size_t> positions;
  std::vector<std::uint16_t> sample_ids;
  std::vector<KeySpan> global_spans;
  std::vector<KeySpan> swa_spans;
};

SequenceLayout make_layout(std::size_t t, std::size_t window, std::span<const std::uint16_t> sample_ids = {});

struct LayerCache {
  std::size_t length = 0;
  std::vector<double> k_tail, v_tail;  // last conv_kernel_size-1 pre-conv rows
  std::vector<double> keys, values;  // post-conv rows, keys also rotated
};

struct KvCache {
  std::vector<LayerCache> layers;
  std::size_t length = 0;
};

KvCache make_kv_cache(const ModelConfig& config);

// Attention block on pre-normed input x [t, d]: projections with the layer's
// head geometry, causal conv on K and V, RoPE on q and post-conv k, scaled
// dot-product over the full causal (GLOBAL) or windowed (SWA) span, and the
// output projection.
Tensor attention_forward(const Tensor& x, const LayerParams& layer, const ModelConfig& config, const SequenceLayout& layout);

// Incremental form: appends to `cache` and attends over cached context.
// position_offset must equal the number of cached positions.
Tensor attention_forward(const Tensor& x, const LayerParams& layer, const ModelConfig& config, LayerCache& cache,
                         std::size_t position_offset);

// Full forward to logits [t, V]. With sample_ids, attention and the K/V
// convolution never cross sample boundaries.
Tensor model_forward(std::span<const TokenId> tokens, const ModelParams& params, const ModelConfig& config,
                     std::span<const std::uint16_t> sample_ids = {});

// Processes the next chunk of a sequence using and extending the cache.
// Runs without graph recording.
Tensor model_forward_cached(std::span<const TokenId> tokens, const ModelParams& params, const ModelConfig& config,
                            KvCache& cache);

// Bytes held by a KV cache at the given context length:
//   GLOBAL: 2 * (global_heads / kv_group_size) * global_head_dim * context_len * bytes
//   SWA:    2 * (swa_heads / kv_group_size) * swa_head_dim * min(context_len, window) * bytes
std::uint64_t kv_cache_size(const ModelConfig& config, std::uint64_t context_len, std::uint64_t bytes_per_value);

// Checkpoint: text header "m1lab-checkpoint 1", the model config as key=value
// lines, a line "parameters <count>", then every tensor from
// ModelParams::tensors() as little-endian float64 in that order.
void save_checkpoint(std::ostream& out, const ModelConfig& config, const ModelParams& params);
void save_checkpoint(const std::string& path, const ModelConfig& config, const ModelParams& params);
std::pair<ModelConfig, ModelParams> load_checkpoint(std::istream& in);
std::pair<ModelConfig, ModelParams> load_checkpoint(const std::string& path);

}  // namespace m1lab
