// Compiled against the double-precision library.
#include "gradcheck_f64.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "bmt/data.hpp"
#include "bmt/model.hpp"
#include "bmt/random.hpp"
#include "bmt/trainer.hpp"

static_assert(std::is_same_v<bmt::Real, double>);

namespace acceptance {

GradcheckReport full_model_gradcheck() {
  using namespace bmt;
  TransformerConfig c;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.n_heads = 2;
  c.vocab_size = 10;
  c.max_len = 8;
  Transformer model(c, 21);
  model.set_quant_state(QuantState::none());

  Rng rng(22);
  std::vector<Example> data;
  for (int i = 0; i < 3; ++i) {
    Example e;
    const auto n = rng.uniform_int(2, 4), m = rng.uniform_int(2, 4);
    for (int t = 0; t < n; ++t) e.src.push_back(static_cast<int>(rng.uniform_int(kFirstContentToken, c.vocab_size - 1)));
    for (int t = 0; t < m; ++t) e.tgt.push_back(static_cast<int>(rng.uniform_int(kFirstContentToken, c.vocab_size - 1)));
    data.push_back(std::move(e));
  }
  const Batch batch = make_batch(data, 0, data.size());

  auto loss_fn = [&] { return sequence_loss(model.forward(batch.src, batch.tgt_in), batch.tgt_out).loss; };
  model.params().zero_grad();
  backward(loss_fn());

  // Error relative to the whole gradient vector: the key biases have an
  // exactly zero gradient (softmax ignores a shift shared by every key), so a
  // per-tensor ratio would only measure roundoff.
  const double h = 1e-6;
  double diff = 0, scale = 0;
  GradcheckReport r;
  for (auto& [name, t] : model.params()) {
    ++r.n_tensors;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i, ++r.n_params) {
      const double saved = v[i];
      double up, down;
      {
        NoGradGuard ng;
        v[i] = saved + h;
        up = loss_fn().item();
        v[i] = saved - h;
        down = loss_fn().item();
      }
      v[i] = saved;
      const double numeric = (up - down) / (2 * h);
      diff = std::max(diff, std::abs(numeric - analytic[i]));
      scale = std::max(scale, std::abs(numeric));
    }
  }
  r.max_rel_error = diff / scale;
  return r;
}

}  // namespace acceptance
