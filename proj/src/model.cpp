#include "m1lab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "m1lab/error.hpp"
#include "m1lab/rng.hpp"

namespace m1lab {

std::string_view layer_kind_name(LayerKind kind) { return kind == LayerKind::kGlobal ? "GLOBAL" : "SWA"; }

std::vector<LayerKind> desk_layer_pattern(std::size_t n_layers) {
  std::vector<LayerKind> pattern(n_layers, LayerKind::kSwa);
  for (std::size_t i = 3; i < n_layers; i += 4) pattern[i] = LayerKind::kGlobal;
  return pattern;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) fail(ErrorKind::kConfig, std::string(name) + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(global_heads, "global_heads");
  positive(global_head_dim, "global_head_dim");
  positive(swa_heads, "swa_heads");
  positive(swa_head_dim, "swa_head_dim");
  positive(window_size, "window_size");
  positive(conv_kernel_size, "conv_kernel_size");
  positive(ffn_hidden, "ffn_hidden");
  positive(kv_group_size, "kv_group_size");
  if (layer_pattern.size() != n_layers) {
    fail(ErrorKind::kConfig, "layer_pattern has " + std::to_string(layer_pattern.size()) + " entries but n_layers is " +
                                 std::to_string(n_layers));
  }
  if (global_head_dim % 2 != 0 || swa_head_dim % 2 != 0) fail(ErrorKind::kConfig, "head dims must be even for RoPE");
  if (global_heads % kv_group_size != 0 || swa_heads % kv_group_size != 0) {
    fail(ErrorKind::kConfig, "kv_group_size must divide both head counts");
  }
  if (!(rope_base > 0.0)) fail(ErrorKind::kConfig, "rope_base must be positive");
  if (!(norm_eps >= 0.0)) fail(ErrorKind::kConfig, "norm_eps must be nonnegative");
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != value.size()) fail(ErrorKind::kConfig, "bad integer for " + key + ": '" + value + "'");
  return static_cast<std::size_t>(v);
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != value.size()) fail(ErrorKind::kConfig, "bad number for " + key + ": '" + value + "'");
  return v;
}

}  // namespace

std::map<std::string, std::string> model_config_to_map(const ModelConfig& c) {
  std::string pattern;
  for (std::size_t i = 0; i < c.layer_pattern.size(); ++i) {
    if (i) pattern += ',';
    pattern += layer_kind_name(c.layer_pattern[i]);
  }
  return {
      {"vocab_size", std::to_string(c.vocab_size)},
      {"d_model", std::to_string(c.d_model)},
      {"n_layers", std::to_string(c.n_layers)},
      {"layer_pattern", pattern},
      {"global_heads", std::to_string(c.global_heads)},
      {"global_head_dim", std::to_string(c.global_head_dim)},
      {"swa_heads", std::to_string(c.swa_heads)},
      {"swa_head_dim", std::to_string(c.swa_head_dim)},
      {"window_size", std::to_string(c.window_size)},
      {"rope_base", format_double(c.rope_base)},
      {"kv_conv", c.kv_conv ? "true" : "false"},
      {"conv_kernel_size", std::to_string(c.conv_kernel_size)},
      {"ffn_hidden", std::to_string(c.ffn_hidden)},
      {"kv_group_size", std::to_string(c.kv_group_size)},
      {"norm_eps", format_double(c.norm_eps)},
  };
}

ModelConfig model_config_from_map(const std::map<std::string, std::string>& values) {
  ModelConfig c;
  bool pattern_given = false;
  for (const auto& [key, value] : values) {
    if (key == "vocab_size") c.vocab_size = parse_size(key, value);
    else if (key == "d_model") c.d_model = parse_size(key, value);
    else if (key == "n_layers") c.n_layers = parse_size(key, value);
    else if (key == "global_heads") c.global_heads = parse_size(key, value);
    else if (key == "global_head_dim") c.global_head_dim = parse_size(key, value);
    else if (key == "swa_heads") c.swa_heads = parse_size(key, value);
    else if (key == "swa_head_dim") c.swa_head_dim = parse_size(key, value);
    else if (key == "window_size") c.window_size = parse_size(key, value);
    else if (key == "rope_base") c.rope_base = parse_double(key, value);
    else if (key == "conv_kernel_size") c.conv_kernel_size = parse_size(key, value);
    else if (key == "ffn_hidden") c.ffn_hidden = parse_size(key, value);
    else if (key == "kv_group_size") c.kv_group_size = parse_size(key, value);
    else if (key == "norm_eps") c.norm_eps = parse_double(key, value);
    else if (key == "kv_conv") {
      if (value != "true" && value != "false") fail(ErrorKind::kConfig, "kv_conv must be true or false");
      c.kv_conv = value == "true";
    } else if (key == "layer_pattern") {
      pattern_given = true;
      c.layer_pattern.clear();
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (item == "GLOBAL") c.layer_pattern.push_back(LayerKind::kGlobal);
        else if (item == "SWA") c.layer_pattern.push_back(LayerKind::kSwa);
        else fail(ErrorKind::kConfig, "unknown layer kind '" + item + "'");
      }
    } else {
      fail(ErrorKind::kConfig, "unknown model setting '" + key + "'");
    }
  }
  if (!pattern_given) c.layer_pattern = desk_layer_pattern(c.n_layers);
  c.validate();
  return c;
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out{embedding};
  for (const auto& l : layers) {
    out.insert(out.end(), {l.attn_norm, l.wq, l.wk, l.wv});
    if (l.conv_k.defined()) out.insert(out.end(), {l.conv_k, l.conv_v});
    out.insert(out.end(), {l.wo, l.ffn_norm, l.w_gate, l.w_up, l.w_down});
  }
  out.push_back(final_norm);
  out.push_back(output);
  return out;
}

std::size_t ModelParams::num_parameters() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.numel();
  return n;
}

ModelParams ModelParams::clone() const {
  auto copy = [](const Tensor& t) {
    if (!t.defined()) return Tensor();
    return Tensor::from_data(t.shape(), {t.data().begin(), t.data().end()}, t.requires_grad());
  };
  ModelParams p;
  p.embedding = copy(embedding);
  for (const auto& l : layers) {
    p.layers.push_back({l.kind, copy(l.attn_norm), copy(l.wq), copy(l.wk), copy(l.wv), copy(l.conv_k), copy(l.conv_v),
                        copy(l.wo), copy(l.ffn_norm), copy(l.w_gate), copy(l.w_up), copy(l.w_down)});
  }
  p.final_norm = copy(final_norm);
  p.output = copy(output);
  return p;
}

void ModelParams::zero_grad() {
  for (auto& t : tensors()) t.zero_grad();
}

std::size_t parameter_count(const ModelConfig& c) {
  std::size_t n = 2 * c.vocab_size * c.d_model + c.d_model;
  for (auto kind : c.layer_pattern) {
    const std::size_t w = c.attn_width(kind);
    n += 2 * c.d_model + 4 * c.d_model * w + 3 * c.d_model * c.ffn_hidden;
    if (c.kv_conv) n += 2 * c.conv_kernel_size * w;
  }
  return n;
}

ModelParams build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const double std_proj = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  const std::size_t d = config.d_model;
  auto ones = [](std::size_t n) { return Tensor::full({n}, 1.0, true); };
  auto conv_init = [&](std::size_t w) {
    const std::size_t k = config.conv_kernel_size;
    std::vector<double> data(k * w);
    for (std::size_t j = 0; j + 1 < k; ++j) {
      for (std::size_t c = 0; c < w; ++c) data[j * w + c] = rng.normal(0.0, std_proj);
    }
    for (std::size_t c = 0; c < w; ++c) data[(k - 1) * w + c] = 1.0;
    return Tensor::from_data({k, w}, std::move(data), true);
  };

  ModelParams p;
  p.embedding = Tensor::randn({config.vocab_size, d}, rng, std_proj, true);
  for (auto kind : config.layer_pattern) {
    const std::size_t w = config.attn_width(kind);
    LayerParams l;
    l.kind = kind;
    l.attn_norm = ones(d);
    l.wq = Tensor::randn({d, w}, rng, std_proj, true);
    l.wk = Tensor::randn({d, w}, rng, std_proj, true);
    l.wv = Tensor::randn({d, w}, rng, std_proj, true);
    if (config.kv_conv) {
      l.conv_k = conv_init(w);
      l.conv_v = conv_init(w);
    }
    l.wo = Tensor::randn({w, d}, rng, std_resid, true);
    l.ffn_norm = ones(d);
    l.w_gate = Tensor::randn({d, config.ffn_hidden}, rng, std_proj, true);
    l.w_up = Tensor::randn({d, config.ffn_hidden}, rng, std_proj, true);
    l.w_down = Tensor::randn({config.ffn_hidden, d}, rng, std_resid, true);
    p.layers.push_back(std::move(l));
  }
  p.final_norm = ones(d);
  p.output = Tensor::randn({d, config.vocab_size}, rng, std_proj, true);
  return p;
}

std::vector<std::vector<bool>> sliding_window_mask(std::size_t t, std::size_t w) {
  std::vector<std::vector<bool>> mask(t, std::vector<bool>(t, false));
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j <= i; ++j) mask[i][j] = i - j < w;
  }
  return mask;
}

SequenceLayout make_layout(std::size_t t, std::size_t window, std::span<const std::uint16_t> sample_ids) {
  if (!sample_ids.empty() && sample_ids.size() != t) {
    fail(ErrorKind::kDimension, "sample id count " + std::to_string(sample_ids.size()) + " differs from sequence length " +
                                    std::to_string(t));
  }
  SequenceLayout layout;
  layout.sample_ids.assign(sample_ids.begin(), sample_ids.end());
  layout.positions.resize(t);
  layout.global_spans.resize(t);
  layout.swa_spans.resize(t);
  std::size_t run_start = 0;
  for (std::size_t i = 0; i < t; ++i) {
    if (!sample_ids.empty() && i > 0 && sample_ids[i] != sample_ids[i - 1]) run_start = i;
    layout.positions[i] = i - run_start;
    const std::size_t lo = std::max(run_start, i + 1 > window ? i + 1 - window : 0);
    layout.global_spans[i] = {static_cast<std::uint32_t>(run_start), static_cast<std::uint32_t>(i + 1)};
    layout.swa_spans[i] = {static_cast<std::uint32_t>(lo), static_cast<std::uint32_t>(i + 1)};
  }
  return layout;
}

KvCache make_kv_cache(const ModelConfig& config) {
  KvCache cache;
  cache.layers.resize(config.n_layers);
  return cache;
}

Tensor attention_forward(const Tensor& x, const LayerParams& layer, const ModelConfig& config, const SequenceLayout& layout) {
  const std::size_t t = x.dim(0);
  if (layout.positions.size() != t) fail(ErrorKind::kDimension, "attention_forward: layout does not match input length");
  const std::size_t heads = config.heads(layer.kind), hd = config.head_dim(layer.kind);
  Tensor q = reshape(matmul(x, layer.wq), {t, heads, hd});
  Tensor k = matmul(x, layer.wk);
  Tensor v = matmul(x, layer.wv);
  if (config.kv_conv) {
    k = causal_conv1d(k, layer.conv_k, layout.sample_ids);
    v = causal_conv1d(v, layer.conv_v, layout.sample_ids);
  }
  q = rope_apply(q, config.rope_base, layout.positions);
  Tensor k3 = rope_apply(reshape(k, {t, heads, hd}), config.rope_base, layout.positions);
  Tensor v3 = reshape(v, {t, heads, hd});
  const auto& spans = layer.kind == LayerKind::kGlobal ? layout.global_spans : layout.swa_spans;
  Tensor o = attention(q, k3, v3, spans);
  return matmul(reshape(o, {t, heads * hd}), layer.wo);
}

namespace {

// Causal conv of the new rows, with the cached pre-conv tail as left context.
std::vector<double> conv_with_tail(const Tensor& raw, const Tensor& kernel, std::vector<double>& tail, std::size_t width,
                                   std::size_t kernel_size) {
  const std::size_t t = raw.dim(0);
  const std::size_t tail_rows = tail.size() / width;
  std::vector<double> joined(tail);
  joined.insert(joined.end(), raw.data().begin(), raw.data().end());
  Tensor y = causal_conv1d(Tensor::from_data({tail_rows + t, width}, joined), kernel);
  const std::size_t keep_rows = std::min(kernel_size - 1, tail_rows + t);
  tail.assign(joined.end() - static_cast<std::ptrdiff_t>(keep_rows * width), joined.end());
  return {y.data().begin() + static_cast<std::ptrdiff_t>(tail_rows * width), y.data().end()};
}

}  // namespace

Tensor attention_forward(const Tensor& x, const LayerParams& layer, const ModelConfig& config, LayerCache& cache,
                         std::size_t position_offset) {
  if (position_offset != cache.length) {
    fail(ErrorKind::kState, "position offset " + std::to_string(position_offset) + " does not match cached length " +
                                std::to_string(cache.length));
  }
  NoGradGuard no_grad;
  const std::size_t t = x.dim(0);
  const std::size_t heads = config.heads(layer.kind), hd = config.head_dim(layer.kind), width = heads * hd;
  if (cache.keys.size() != cache.length * width) fail(ErrorKind::kState, "cache geometry does not match layer kind");
  Tensor q = rope_apply(reshape(matmul(x, layer.wq), {t, heads, hd}), config.rope_base, position_offset);
  Tensor k_raw = matmul(x, layer.wk);
  Tensor v_raw = matmul(x, layer.wv);
  std::vector<double> k_new, v_new;
  if (config.kv_conv) {
    k_new = conv_with_tail(k_raw, layer.conv_k, cache.k_tail, width, config.conv_kernel_size);
    v_new = conv_with_tail(v_raw, layer.conv_v, cache.v_tail, width, config.conv_kernel_size);
  } else {
    k_new.assign(k_raw.data().begin(), k_raw.data().end());
    v_new.assign(v_raw.data().begin(), v_raw.data().end());
  }
  Tensor k_rot = rope_apply(Tensor::from_data({t, heads, hd}, std::move(k_new)), config.rope_base, position_offset);
  cache.keys.insert(cache.keys.end(), k_rot.data().begin(), k_rot.data().end());
  cache.values.insert(cache.values.end(), v_new.begin(), v_new.end());
  cache.length += t;

  std::vector<KeySpan> spans(t);
  for (std::size_t i = 0; i < t; ++i) {
    const std::size_t pos = position_offset + i;
    std::size_t lo = 0;
    if (layer.kind == LayerKind::kSwa && pos + 1 > config.window_size) lo = pos + 1 - config.window_size;
    spans[i] = {static_cast<std::uint32_t>(lo), static_cast<std::uint32_t>(pos + 1)};
  }
  Tensor keys = Tensor::from_data({cache.length, heads, hd}, cache.keys);
  Tensor vals = Tensor::from_data({cache.length, heads, hd}, cache.values);
  Tensor o = attention(q, keys, vals, spans);
  return matmul(reshape(o, {t, width}), layer.wo);
}

namespace {

void check_tokens(std::span<const TokenId> tokens, const ModelConfig& config) {
  if (tokens.empty()) fail(ErrorKind::kDimension, "model_forward: empty token list");
  for (auto id : tokens) {
    if (id >= config.vocab_size) {
      fail(ErrorKind::kIndex, "token id " + std::to_string(id) + " out of range for vocabulary of " + std::to_string(config.vocab_size));
    }
  }
}

}  // namespace

Tensor model_forward(std::span<const TokenId> tokens, const ModelParams& params, const ModelConfig& config,
                     std::span<const std::uint16_t> sample_ids) {
  check_tokens(tokens, config);
  const auto layout = make_layout(tokens.size(), config.window_size, sample_ids);
  Tensor h = embedding(params.embedding, tokens);
  for (const auto& layer : params.layers) {
    h = add(h, attention_forward(rmsnorm(h, layer.attn_norm, config.norm_eps), layer, config, layout));
    h = add(h, swiglu_ffn(rmsnorm(h, layer.ffn_norm, config.norm_eps), layer.w_gate, layer.w_up, layer.w_down));
  }
  return matmul(rmsnorm(h, params.final_norm, config.norm_eps), params.output);
}

Tensor model_forward_cached(std::span<const TokenId> tokens, const ModelParams& params, const ModelConfig& config,
                            KvCache& cache) {
  check_tokens(tokens, config);
  if (cache.layers.size() != params.layers.size()) fail(ErrorKind::kState, "cache layer count does not match model");
  NoGradGuard no_grad;
  const std::size_t offset = cache.length;
  Tensor h = embedding(params.embedding, tokens);
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& layer = params.layers[i];
    h = add(h, attention_forward(rmsnorm(h, layer.attn_norm, config.norm_eps), layer, config, cache.layers[i], offset));
    h = add(h, swiglu_ffn(rmsnorm(h, layer.ffn_norm, config.norm_eps), layer.w_gate, layer.w_up, layer.w_down));
  }
  cache.length += tokens.size();
  return matmul(rmsnorm(h, params.final_norm, config.norm_eps), params.output);
}

std::uint64_t kv_cache_size(const ModelConfig& config, std::uint64_t context_len, std::uint64_t bytes_per_value) {
  std::uint64_t total = 0;
  for (auto kind : config.layer_pattern) {
    const std::uint64_t kv_heads = config.heads(kind) / config.kv_group_size;
    const std::uint64_t span = kind == LayerKind::kGlobal ? context_len : std::min<std::uint64_t>(context_len, config.window_size);
    total += 2 * kv_heads * config.head_dim(kind) * span * bytes_per_value;
  }
  return total;
}

namespace {

constexpr const char* kCheckpointMagic = "m1lab-checkpoint 1";

void write_f64_le(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  out.write(bytes, 8);
}

double read_f64_le(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) fail(ErrorKind::kIo, "checkpoint truncated");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace

void save_checkpoint(std::ostream& out, const ModelConfig& config, const ModelParams& params) {
  out << kCheckpointMagic << '\n';
  for (const auto& [k, v] : model_config_to_map(config)) out << k << '=' << v << '\n';
  const auto tensors = params.tensors();
  out << "parameters " << params.num_parameters() << '\n';
  for (const auto& t : tensors) {
    for (double v : t.data()) write_f64_le(out, v);
  }
  if (!out) fail(ErrorKind::kIo, "failed to write checkpoint");
}

void save_checkpoint(const std::string& path, const ModelConfig& config, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot open " + path + " for writing");
  save_checkpoint(out, config, params);
}

std::pair<ModelConfig, ModelParams> load_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) fail(ErrorKind::kIo, "not an m1lab checkpoint");
  std::map<std::string, std::string> values;
  std::size_t count = 0;
  while (std::getline(in, line)) {
    if (line.rfind("parameters ", 0) == 0) {
      count = std::stoull(line.substr(11));
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::kIo, "malformed checkpoint header line '" + line + "'");
    values[line.substr(0, eq)] = line.substr(eq + 1);
  }
  ModelConfig config = model_config_from_map(values);
  ModelParams params = build_model(config, 0);
  if (count != params.num_parameters()) {
    fail(ErrorKind::kIo, "checkpoint holds " + std::to_string(count) + " parameters, config implies " +
                             std::to_string(params.num_parameters()));
  }
  for (auto& t : params.tensors()) {
    for (auto& v : t.mutable_data()) v = read_f64_le(in);
  }
  return {std::move(config), std::move(params)};
}

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path);
  return load_checkpoint(in);
}

}  // namespace m1lab
