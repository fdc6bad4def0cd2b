#include "cwe/encoder.hpp"

namespace cwe::model {

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("encoder config: " + msg);
  };
  if (vocab_size < 1) fail("vocab_size must be >= 1");
  if (hidden_dim < 1) fail("hidden_dim must be >= 1");
  if (num_layers < 1) fail("num_layers must be >= 1");
  if (num_heads < 1) fail("num_heads must be >= 1");
  if (ff_dim < 1) fail("ff_dim must be >= 1");
  if (max_positions < 1 || max_positions > 512) {
    fail("max_positions must be in [1, 512]");
  }
  if (hidden_dim % num_heads != 0) {
    fail("hidden_dim not divisible by num_heads (" +
         std::to_string(hidden_dim) + " % " + std::to_string(num_heads) +
         " != 0)");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    fail("dropout_rate must be in [0, 1)");
  }
  if (!(layer_norm_epsilon > 0.0)) fail("layer_norm_epsilon must be > 0");
}

BatchView view_of(const batch::MaskedBatch& b) {
  BatchView view;
  view.input_ids = b.input_ids.data();
  view.attention_mask = b.attention_mask.data();
  view.rows = b.rows;
  view.row_length = b.row_length;
  return view;
}

template struct Parameters<float>;
template struct Parameters<double>;
template Parameters<float> init_params<float>(const EncoderConfig&,
                                              std::uint64_t);
template Parameters<double> init_params<double>(const EncoderConfig&,
                                                std::uint64_t);
template void forward<float>(const Parameters<float>&, const BatchView&,
                             ForwardCache<float>&, DetRng*);
template void forward<double>(const Parameters<double>&, const BatchView&,
                              ForwardCache<double>&, DetRng*);
template double mlm_loss<float>(const Parameters<float>&,
                                const batch::MaskedBatch&, DetRng*);
template double mlm_loss<double>(const Parameters<double>&,
                                 const batch::MaskedBatch&, DetRng*);
template double mlm_loss_and_grad<float>(const Parameters<float>&,
                                         const batch::MaskedBatch&,
                                         Parameters<float>&, DetRng*);
template double mlm_loss_and_grad<double>(const Parameters<double>&,
                                          const batch::MaskedBatch&,
                                          Parameters<double>&, DetRng*);

}  // namespace cwe::model
