#include <gtest/gtest.h>

#include <sstream>

#include "m1lab/error.hpp"
#include "m1lab/grad_check.hpp"
#include "m1lab/model.hpp"

namespace m1lab {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 11;
  c.d_model = 8;
  c.n_layers = 2;
  c.layer_pattern = {LayerKind::kSwa, LayerKind::kGlobal};
  c.global_heads = 1;
  c.global_head_dim = 6;
  c.swa_heads = 2;
  c.swa_head_dim = 4;
  c.window_size = 3;
  c.rope_base = 1e4;
  c.conv_kernel_size = 2;
  c.ffn_hidden = 12;
  return c;
}

// Larger weights than the production init so that every path carries signal.
ModelParams noisy_model(const ModelConfig& c, std::uint64_t seed) {
  ModelParams p = build_model(c, seed);
  Rng rng(seed + 1000);
  for (auto& t : p.tensors()) {
    for (auto& v : t.mutable_data()) v += rng.normal(0.0, 0.3);
  }
  return p;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = static_cast<TokenId>(rng.below(vocab));
  return ids;
}

TEST(BuildModel, SameSeedIsBitIdentical) {
  const auto c = tiny_config();
  auto a = build_model(c, 42).tensors();
  auto b = build_model(c, 42).tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(values(a[i]), values(b[i]));
}

TEST(BuildModel, PatternLengthMismatchIsConfigError) {
  auto c = tiny_config();
  c.layer_pattern.push_back(LayerKind::kSwa);
  try {
    build_model(c, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
}

TEST(BuildModel, DeskParameterCountMatchesHandCount) {
  ModelConfig c;
  c.vocab_size = 256;
  c.d_model = 64;
  c.n_layers = 4;
  c.layer_pattern = desk_layer_pattern(4);
  // per layer: norms 2*64, q/k/v/o 4*64*64, conv 2*2*64, ffn 3*64*128
  const std::size_t per_layer = 128 + 16384 + 256 + 24576;
  const std::size_t expected = 4 * per_layer + 2 * 256 * 64 + 64;
  EXPECT_EQ(expected, 198208u);
  EXPECT_EQ(parameter_count(c), expected);
  EXPECT_EQ(build_model(c, 3).num_parameters(), expected);
  c.kv_conv = false;
  EXPECT_EQ(build_model(c, 3).num_parameters(), expected - 4 * 256);
}

TEST(SlidingWindowMask, Examples) {
  auto full = sliding_window_mask(5, 9);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(full[i][j], j <= i);
  }
  auto self = sliding_window_mask(4, 1);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(self[i][j], i == j);
  }
  auto m = sliding_window_mask(4, 2);
  const std::vector<std::vector<std::size_t>> expected{{0}, {0, 1}, {1, 2}, {2, 3}};
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<std::size_t> allowed;
    for (std::size_t j = 0; j < 4; ++j) {
      if (m[i][j]) allowed.push_back(j);
    }
    EXPECT_EQ(allowed, expected[i]);
  }
}

TEST(SlidingWindowMask, LayoutSpansAgreeWithMask) {
  for (std::size_t w = 1; w < 7; ++w) {
    auto mask = sliding_window_mask(9, w);
    auto layout = make_layout(9, w);
    for (std::size_t i = 0; i < 9; ++i) {
      for (std::size_t j = 0; j < 9; ++j) {
        const bool in_span = j >= layout.swa_spans[i].begin && j < layout.swa_spans[i].end;
        EXPECT_EQ(in_span, mask[i][j]);
      }
    }
  }
}

TEST(AttentionForward, SingleTokenUsesOnlyValuePath) {
  const auto c = tiny_config();
  auto p = noisy_model(c, 5);
  Rng rng(6);
  Tensor x = Tensor::randn({1, c.d_model}, rng, 1.0);
  for (const auto& layer : p.layers) {
    const std::size_t w = c.attn_width(layer.kind);
    auto y = values(attention_forward(x, layer, c, make_layout(1, c.window_size)));
    // v = x Wv, conv at t=0 keeps only the last tap, then project with Wo.
    std::vector<double> v(w, 0.0);
    for (std::size_t j = 0; j < w; ++j) {
      for (std::size_t i = 0; i < c.d_model; ++i) v[j] += x[i] * layer.wv[i * w + j];
      v[j] *= layer.conv_v[(c.conv_kernel_size - 1) * w + j];
    }
    for (std::size_t o = 0; o < c.d_model; ++o) {
      double expect = 0.0;
      for (std::size_t j = 0; j < w; ++j) expect += v[j] * layer.wo[j * c.d_model + o];
      EXPECT_NEAR(y[o], expect, 1e-12);
    }
  }
}

TEST(AttentionForward, SwaOutputIgnoresTokensOutsideReceptiveField) {
  auto c = tiny_config();
  c.conv_kernel_size = 3;
  auto p = noisy_model(c, 7);
  const auto& swa = p.layers[0];
  ASSERT_EQ(swa.kind, LayerKind::kSwa);
  Rng rng(8);
  const std::size_t t = 12;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = Tensor::randn({t, c.d_model}, rng, 1.0);
    auto layout = make_layout(t, c.window_size);
    auto base = values(attention_forward(x, swa, c, layout));
    const std::size_t i = t - 1;
    const std::size_t horizon = i - c.window_size + 1 - (c.conv_kernel_size - 1);
    auto xv = values(x);
    for (std::size_t r = 0; r < horizon; ++r) {
      for (std::size_t k = 0; k < c.d_model; ++k) xv[r * c.d_model + k] += rng.normal();
    }
    auto moved = values(attention_forward(Tensor::from_data({t, c.d_model}, xv), swa, c, layout));
    for (std::size_t k = 0; k < c.d_model; ++k) EXPECT_EQ(base[i * c.d_model + k], moved[i * c.d_model + k]);
    // the oldest token inside the field does matter
    xv = values(x);
    for (std::size_t k = 0; k < c.d_model; ++k) xv[horizon * c.d_model + k] += 1.0;
    moved = values(attention_forward(Tensor::from_data({t, c.d_model}, xv), swa, c, layout));
    bool changed = false;
    for (std::size_t k = 0; k < c.d_model; ++k) changed |= base[i * c.d_model + k] != moved[i * c.d_model + k];
    EXPECT_TRUE(changed);
  }
}

TEST(AttentionForward, GlobalLastPositionSeesFirstToken) {
  const auto c = tiny_config();
  auto p = noisy_model(c, 9);
  const auto& global = p.layers[1];
  ASSERT_EQ(global.kind, LayerKind::kGlobal);
  Rng rng(10);
  const std::size_t t = 10;
  Tensor x = Tensor::randn({t, c.d_model}, rng, 1.0);
  auto layout = make_layout(t, c.window_size);
  auto base = values(attention_forward(x, global, c, layout));
  auto xv = values(x);
  for (std::size_t k = 0; k < c.d_model; ++k) xv[k] += 1.0;
  auto moved = values(attention_forward(Tensor::from_data({t, c.d_model}, xv), global, c, layout));
  double diff = 0.0;
  for (std::size_t k = 0; k < c.d_model; ++k) diff += std::abs(base[(t - 1) * c.d_model + k] - moved[(t - 1) * c.d_model + k]);
  EXPECT_GT(diff, 1e-6);
}

TEST(ModelForward, PackedSamplesMatchIsolatedRuns) {
  const auto c = tiny_config();
  auto p = noisy_model(c, 11);
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t la = 1 + rng.below(8), lb = 1 + rng.below(8);
    auto a = random_tokens(la, c.vocab_size, rng);
    auto b = random_tokens(lb, c.vocab_size, rng);
    std::vector<TokenId> packed(a);
    packed.insert(packed.end(), b.begin(), b.end());
    std::vector<std::uint16_t> ids(la, 1);
    ids.insert(ids.end(), lb, 2);
    auto joint = values(model_forward(packed, p, c, ids));
    auto sa = values(model_forward(a, p, c));
    auto sb = values(model_forward(b, p, c));
    for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_NEAR(joint[i], sa[i], 1e-9);
    for (std::size_t i = 0; i < sb.size(); ++i) EXPECT_NEAR(joint[sa.size() + i], sb[i], 1e-9);
  }
}

TEST(ModelForward, IdenticalTokensGivePositionDependentLogits) {
  const auto c = tiny_config();
  auto p = noisy_model(c, 13);
  std::vector<TokenId> same(6, 4);
  auto logits = values(model_forward(same, p, c));
  for (std::size_t i = 1; i < same.size(); ++i) {
    double diff = 0.0;
    for (std::size_t v = 0; v < c.vocab_size; ++v) diff += std::abs(logits[i * c.vocab_size + v] - logits[v]);
    EXPECT_GT(diff, 1e-9);
  }
}

TEST(ModelForward, TokenOutOfRangeIsIndexError) {
  const auto c = tiny_config();
  auto p = build_model(c, 1);
  std::vector<TokenId> bad{1, 11};
  try {
    model_forward(bad, p, c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIndex);
  }
}

TEST(ModelForward, EmbeddingGradientMatchesFiniteDifferences) {
  const auto c = tiny_config();
  auto p = noisy_model(c, 14);
  Rng rng(15);
  auto tokens = random_tokens(7, c.vocab_size, rng);
  std::vector<std::int32_t> targets(tokens.size());
  for (auto& t : targets) t = static_cast<std::int32_t>(rng.below(c.vocab_size));
  auto r = grad_check([&] { return cross_entropy(model_forward(tokens, p, c), targets); }, {p.embedding});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(ModelForward, FullModelGradientMatchesFiniteDifferences) {
  const auto c = tiny_config();
  auto p = noisy_model(c, 16);
  Rng rng(17);
  auto tokens = random_tokens(6, c.vocab_size, rng);
  std::vector<std::int32_t> targets(tokens.size());
  for (auto& t : targets) t = static_cast<std::int32_t>(rng.below(c.vocab_size));
  const std::vector<std::uint16_t> ids{1, 1, 1, 2, 2, 2};
  auto r = grad_check([&] { return cross_entropy(model_forward(tokens, p, c, ids), targets); }, p.tensors());
  EXPECT_LT(r.max_rel_error, 1e-5) << "worst tensor " << r.worst_input;
}

TEST(KvCache, IncrementalDecodingMatchesFullForward) {
  for (bool conv : {true, false}) {
    auto c = tiny_config();
    c.kv_conv = conv;
    c.conv_kernel_size = 3;
    auto p = noisy_model(c, 18);
    Rng rng(19);
    auto tokens = random_tokens(13, c.vocab_size, rng);
    auto full = values(model_forward(tokens, p, c));
    auto cache = make_kv_cache(c);
    std::size_t pos = 0;
    for (std::size_t chunk : {4u, 1u, 1u, 5u, 2u}) {
      std::span<const TokenId> part(tokens.data() + pos, chunk);
      auto got = values(model_forward_cached(part, p, c, cache));
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], full[pos * c.vocab_size + i], 1e-9);
      pos += chunk;
    }
    EXPECT_EQ(cache.length, tokens.size());
  }
}

TEST(KvCache, PositionMismatchIsStateError) {
  const auto c = tiny_config();
  auto p = build_model(c, 1);
  LayerCache cache;
  Tensor x = Tensor::zeros({2, c.d_model});
  try {
    attention_forward(x, p.layers[0], c, cache, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kState);
  }
}

TEST(KvCacheSize, WithinWindowEqualsUncappedFormula) {
  ModelConfig c;
  c.window_size = 64;
  for (std::uint64_t len = 1; len <= 64; ++len) {
    std::uint64_t uncapped = 0;
    for (auto kind : c.layer_pattern) uncapped += 2 * c.heads(kind) * c.head_dim(kind) * len * 2;
    EXPECT_EQ(kv_cache_size(c, len, 2), uncapped);
  }
}

TEST(KvCacheSize, HybridSmallerThanAllGlobalBeyondWindow) {
  ModelConfig hybrid;
  hybrid.window_size = 64;
  ModelConfig all_global = hybrid;
  all_global.layer_pattern.assign(all_global.n_layers, LayerKind::kGlobal);
  EXPECT_LT(kv_cache_size(hybrid, 4 * 64, 2), kv_cache_size(all_global, 4 * 64, 2));
}

TEST(KvCacheSize, EventuallyAffineWithGlobalSlope) {
  ModelConfig c;
  c.window_size = 32;
  std::uint64_t global_slope = 0;
  for (auto kind : c.layer_pattern) {
    if (kind == LayerKind::kGlobal) global_slope += 2 * c.global_heads * c.global_head_dim * 4;
  }
  std::uint64_t prev = 0;
  for (std::uint64_t len = 1; len < 200; ++len) {
    const auto s = kv_cache_size(c, len, 4);
    EXPECT_GE(s, prev);
    if (len > c.window_size) {
      EXPECT_EQ(s - prev, global_slope);
    }
    prev = s;
  }
}

TEST(KvCacheSize, FullScaleGeometryGroupingArithmetic) {
  ModelConfig c;
  c.d_model = 512;
  c.global_heads = 2;
  c.global_head_dim = 256;
  c.swa_heads = 8;
  c.swa_head_dim = 128;
  c.window_size = 2048;
  c.n_layers = 2;
  c.layer_pattern = {LayerKind::kSwa, LayerKind::kGlobal};
  // one GLOBAL layer: 2*2*256*ctx; one SWA layer: 2*8*128*min(ctx, 2048)
  EXPECT_EQ(kv_cache_size(c, 4096, 1), 2ull * 2 * 256 * 4096 + 2ull * 8 * 128 * 2048);
  c.kv_group_size = 2;
  EXPECT_EQ(kv_cache_size(c, 4096, 1), 2ull * 1 * 256 * 4096 + 2ull * 4 * 128 * 2048);
}

TEST(Checkpoint, RoundTripPreservesConfigAndParameters) {
  auto c = tiny_config();
  c.rope_base = 123456.789;
  auto p = noisy_model(c, 20);
  std::stringstream buf;
  save_checkpoint(buf, c, p);
  auto [c2, p2] = load_checkpoint(buf);
  EXPECT_EQ(c2, c);
  auto a = p.tensors(), b = p2.tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(values(a[i]), values(b[i]));
}

TEST(ModelConfigText, UnknownKeyIsConfigError) {
  std::map<std::string, std::string> kv{{"heads", "3"}};
  EXPECT_THROW(model_config_from_map(kv), Error);
}

}  // namespace
}  // namespace m1lab
