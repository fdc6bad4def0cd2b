#include <cmath>
#include <vector>

#include "cwe/encoder.hpp"
#include "cwe/rng.hpp"
#include "doctest.h"
#include "support/synthetic.hpp"

using namespace cwe::model;
using cwe::DetRng;
using cwe::batch::kIgnoreLabel;
using cwe::batch::MaskedBatch;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.vocab_size = 50;
  c.max_positions = 12;
  c.hidden_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ff_dim = 32;
  c.dropout_rate = 0.0;
  return c;
}

// Two rows of length 12; the second row carries three padding positions.
MaskedBatch tiny_batch(std::int32_t vocab_size, std::uint64_t seed,
                       int labels_per_row = 3) {
  MaskedBatch mb;
  mb.rows = 2;
  mb.row_length = 12;
  DetRng rng(seed);
  mb.input_ids.assign(24, 0);
  mb.labels.assign(24, kIgnoreLabel);
  mb.attention_mask.assign(24, 1);
  for (std::int64_t i = 0; i < 24; ++i) {
    mb.input_ids[i] = static_cast<std::int32_t>(
        rng.next_below(static_cast<std::uint64_t>(vocab_size)));
  }
  for (std::int64_t i = 21; i < 24; ++i) {
    mb.attention_mask[i] = 0;
    mb.input_ids[i] = 0;
  }
  for (int r = 0; r < 2; ++r) {
    for (int l = 0; l < labels_per_row; ++l) {
      const std::int64_t pos = r * 12 + 2 + l * 3;
      mb.labels[pos] = static_cast<std::int32_t>(
          rng.next_below(static_cast<std::uint64_t>(vocab_size)));
    }
  }
  return mb;
}

}  // namespace

TEST_CASE("init_params is deterministic and shaped by the config") {
  auto cfg = tiny_config();
  auto a = init_params<float>(cfg, 42);
  auto b = init_params<float>(cfg, 42);
  auto refs_a = a.tensors();
  auto refs_b = b.tensors();
  REQUIRE(refs_a.size() == refs_b.size());
  for (std::size_t i = 0; i < refs_a.size(); ++i) {
    CHECK(*refs_a[i].data == *refs_b[i].data);
  }
  auto c = init_params<float>(cfg, 43);
  CHECK(a.token_embedding != c.token_embedding);

  SUBCASE("layer-norm scales start at exactly one") {
    for (float g : a.emb_ln_gamma) CHECK(g == 1.0f);
    for (float g : a.layers[0].ln1_gamma) CHECK(g == 1.0f);
    for (float bta : a.layers[0].ln1_beta) CHECK(bta == 0.0f);
  }
  SUBCASE("weights stay inside the truncation bounds") {
    for (float w : a.token_embedding) {
      CHECK(std::fabs(w) <= 2.0f * 0.02f + 1e-6f);
    }
  }
  SUBCASE("indivisible head count names the constraint") {
    EncoderConfig bad = cfg;
    bad.num_heads = 3;
    CHECK_THROWS_WITH_AS(init_params<float>(bad, 1),
                         doctest::Contains("hidden_dim not divisible"),
                         std::invalid_argument);
  }
}

TEST_CASE("forward validates ids and masks") {
  auto params = init_params<float>(tiny_config(), 1);
  MaskedBatch mb = tiny_batch(50, 2);
  mb.input_ids[5] = 50;  // == vocab_size
  ForwardCache<float> cache;
  CHECK_THROWS_WITH_AS(forward(params, view_of(mb), cache),
                       doctest::Contains("position 5"),
                       std::invalid_argument);
}

TEST_CASE("attention rows over keys are a probability distribution") {
  auto params = init_params<double>(tiny_config(), 3);
  MaskedBatch mb = tiny_batch(50, 4);
  ForwardCache<double> cache;
  forward(params, view_of(mb), cache);
  const auto& lc = cache.layer_cache[0];
  const std::size_t len = 12;
  const std::size_t heads = 2;
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t a = 0; a < heads; ++a) {
      for (std::size_t i = 0; i < len; ++i) {
        const double* row =
            lc.probs.data() + ((r * heads + a) * len + i) * len;
        double sum = 0;
        for (std::size_t j = 0; j < len; ++j) sum += row[j];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        // Padded keys receive (numerically) zero attention.
        if (r == 1) {
          for (std::size_t j = 9; j < len; ++j) CHECK(row[j] == 0.0);
        }
      }
    }
  }
}

TEST_CASE("appending padded columns leaves real positions unchanged") {
  auto cfg = tiny_config();
  auto params = init_params<float>(cfg, 7);
  MaskedBatch base = tiny_batch(50, 9);
  base.rows = 1;
  base.row_length = 9;
  base.input_ids.resize(9);
  base.labels.resize(9);
  base.attention_mask.assign(9, 1);

  MaskedBatch padded = base;
  padded.row_length = 12;
  padded.input_ids.resize(12, 0);
  padded.labels.resize(12, kIgnoreLabel);
  padded.attention_mask.resize(12, 0);

  ForwardCache<float> c1, c2;
  forward(params, view_of(base), c1);
  forward(params, view_of(padded), c2);
  const auto h = static_cast<std::size_t>(cfg.hidden_dim);
  for (std::size_t p = 0; p < 9; ++p) {
    for (std::size_t j = 0; j < h; ++j) {
      CHECK(c1.final_hidden()[p * h + j] ==
            doctest::Approx(c2.final_hidden()[p * h + j]).epsilon(1e-5));
    }
  }
}

TEST_CASE("the encoder is bidirectional") {
  auto cfg = tiny_config();
  auto params = init_params<float>(cfg, 11);
  MaskedBatch mb = tiny_batch(50, 13);
  mb.rows = 1;
  mb.row_length = 12;
  mb.input_ids.resize(12);
  mb.labels.resize(12);
  mb.attention_mask.assign(12, 1);

  ForwardCache<float> before;
  forward(params, view_of(mb), before);
  mb.input_ids[11] = (mb.input_ids[11] + 1) % 50;
  ForwardCache<float> after;
  forward(params, view_of(mb), after);

  const auto h = static_cast<std::size_t>(cfg.hidden_dim);
  double delta = 0;
  for (std::size_t j = 0; j < h; ++j) {
    delta += std::fabs(before.final_hidden()[j] - after.final_hidden()[j]);
  }
  CHECK(delta > 0.0);
}

TEST_CASE("random-init loss is close to ln(vocab)") {
  auto cfg = tiny_config();
  auto params = init_params<float>(cfg, 19);
  MaskedBatch mb = tiny_batch(50, 21, 4);
  const double loss = mlm_loss(params, mb);
  CHECK(loss == doctest::Approx(std::log(50.0)).epsilon(0.05));
}

TEST_CASE("one-hot logits drive the loss to zero") {
  // Zero decoder weights and a huge bias at the common target id force the
  // logits to a one-hot distribution through the real loss path.
  EncoderConfig cfg = tiny_config();
  cfg.tie_output = false;
  auto params = init_params<float>(cfg, 31);
  std::fill(params.output_projection.begin(), params.output_projection.end(),
            0.0f);
  std::fill(params.output_bias.begin(), params.output_bias.end(), 0.0f);
  params.output_bias[7] = 30.0f;

  MaskedBatch mb = tiny_batch(50, 33, 4);
  for (auto& l : mb.labels) {
    if (l != kIgnoreLabel) l = 7;
  }
  CHECK(mlm_loss(params, mb) < 1e-6);
}

TEST_CASE("a batch with no labels is rejected") {
  auto params = init_params<float>(tiny_config(), 23);
  MaskedBatch mb = tiny_batch(50, 25);
  std::fill(mb.labels.begin(), mb.labels.end(), kIgnoreLabel);
  CHECK_THROWS_AS(mlm_loss(params, mb), std::invalid_argument);
}

TEST_CASE("duplicating every row leaves the mean loss unchanged") {
  auto params = init_params<float>(tiny_config(), 29);
  MaskedBatch mb = tiny_batch(50, 31, 4);
  MaskedBatch doubled = mb;
  doubled.rows = 4;
  doubled.input_ids.insert(doubled.input_ids.end(), mb.input_ids.begin(),
                           mb.input_ids.end());
  doubled.labels.insert(doubled.labels.end(), mb.labels.begin(),
                        mb.labels.end());
  doubled.attention_mask.insert(doubled.attention_mask.end(),
                                mb.attention_mask.begin(),
                                mb.attention_mask.end());
  CHECK(mlm_loss(params, mb) ==
        doctest::Approx(mlm_loss(params, doubled)).epsilon(1e-6));
}

TEST_CASE("analytic gradients match central finite differences (float64)") {
  EncoderConfig cfg = tiny_config();
  cfg.tie_output = true;
  auto params = init_params<double>(cfg, 37);
  MaskedBatch mb = tiny_batch(50, 41, 3);

  Parameters<double> grads;
  const double base_loss = mlm_loss_and_grad(params, mb, grads);
  CHECK(std::isfinite(base_loss));

  // Fourth-order central stencil: at h = 1e-3 its truncation error sits far
  // below the bound, so plain relative error is meaningful even on the
  // smallest nonzero gradients. True-zero entries are held to an absolute
  // bound instead.
  const double h = 1e-3;
  double max_rel = 0.0;
  std::string worst;
  auto p_refs = params.tensors();
  auto g_refs = grads.tensors();
  for (std::size_t t = 0; t < p_refs.size(); ++t) {
    auto& data = *p_refs[t].data;
    auto& gdata = *g_refs[t].data;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      auto eval = [&](double x) {
        data[i] = x;
        const double value = mlm_loss(params, mb);
        data[i] = saved;
        return value;
      };
      const double numeric =
          (8.0 * (eval(saved + h) - eval(saved - h)) -
           (eval(saved + 2.0 * h) - eval(saved - 2.0 * h))) /
          (12.0 * h);
      const double analytic = gdata[i];
      const double scale = std::max(std::fabs(analytic), std::fabs(numeric));
      if (scale < 1e-8) {
        CHECK(std::fabs(analytic - numeric) <= 1e-10);
        continue;
      }
      const double rel = std::fabs(analytic - numeric) / scale;
      if (rel > max_rel) {
        max_rel = rel;
        worst = p_refs[t].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  CAPTURE(worst);
  MESSAGE("max relative gradient error: ", max_rel, " at ", worst);
  CHECK(max_rel <= 1e-4);
}

TEST_CASE("untied embedding rows absent from the batch have zero gradient") {
  EncoderConfig cfg = tiny_config();
  cfg.tie_output = false;
  auto params = init_params<double>(cfg, 43);
  MaskedBatch mb = tiny_batch(50, 47, 3);

  std::vector<bool> used(50, false);
  for (auto id : mb.input_ids) used[static_cast<std::size_t>(id)] = true;

  Parameters<double> grads;
  mlm_loss_and_grad(params, mb, grads);
  const auto h = static_cast<std::size_t>(cfg.hidden_dim);
  for (std::size_t v = 0; v < 50; ++v) {
    if (used[v]) continue;
    for (std::size_t j = 0; j < h; ++j) {
      CHECK(grads.token_embedding[v * h + j] == 0.0);
    }
  }
}

TEST_CASE("position rows past the longest batch row have zero gradient") {
  EncoderConfig cfg = tiny_config();
  cfg.max_positions = 12;
  auto params = init_params<double>(cfg, 53);
  MaskedBatch mb = tiny_batch(50, 59, 3);
  mb.rows = 1;
  mb.row_length = 8;
  mb.input_ids.resize(8);
  mb.labels.resize(8);
  mb.labels[2] = 7;
  mb.attention_mask.assign(8, 1);
  Parameters<double> grads;
  mlm_loss_and_grad(params, mb, grads);
  const auto h = static_cast<std::size_t>(cfg.hidden_dim);
  for (std::size_t p = 8; p < 12; ++p) {
    for (std::size_t j = 0; j < h; ++j) {
      CHECK(grads.position_embedding[p * h + j] == 0.0);
    }
  }
}

TEST_CASE("one small step along the negative gradient reduces the loss") {
  auto params = init_params<double>(tiny_config(), 61);
  MaskedBatch mb = tiny_batch(50, 67, 4);
  Parameters<double> grads;
  const double before = mlm_loss_and_grad(params, mb, grads);
  auto p_refs = params.tensors();
  auto g_refs = grads.tensors();
  const double eta = 1e-3;
  for (std::size_t t = 0; t < p_refs.size(); ++t) {
    auto& p = *p_refs[t].data;
    auto& g = *g_refs[t].data;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= eta * g[i];
  }
  CHECK(mlm_loss(params, mb) < before);
}

TEST_CASE("non-finite gradients raise an error naming the tensor") {
  auto params = init_params<double>(tiny_config(), 79);
  params.layers[1].w1[3] = std::numeric_limits<double>::infinity();
  MaskedBatch mb = tiny_batch(50, 83, 3);
  Parameters<double> grads;
  CHECK_THROWS_WITH_AS(mlm_loss_and_grad(params, mb, grads),
                       doctest::Contains("non-finite gradient"),
                       std::runtime_error);
}

TEST_CASE("dropout is active only when an rng is supplied") {
  EncoderConfig cfg = tiny_config();
  cfg.dropout_rate = 0.3;
  auto params = init_params<float>(cfg, 71);
  MaskedBatch mb = tiny_batch(50, 73, 4);
  const double eval1 = mlm_loss(params, mb);
  const double eval2 = mlm_loss(params, mb);
  CHECK(eval1 == eval2);
  DetRng rng_a(5);
  DetRng rng_b(5);
  DetRng rng_c(6);
  const double train_a = mlm_loss(params, mb, &rng_a);
  const double train_b = mlm_loss(params, mb, &rng_b);
  const double train_c = mlm_loss(params, mb, &rng_c);
  CHECK(train_a == train_b);
  CHECK(train_a != train_c);
  CHECK(train_a != eval1);
}
