#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mia/templates.hpp"

namespace mia::lm {

// Byte-level tokenizer: BOS=0, EOS=1, byte b -> b+2.
inline constexpr int kBosId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kByteOffset = 2;
inline constexpr int kMinVocab = 258;

std::vector<int> tokenize(std::string_view text);
std::string detokenize(std::span<const int> ids);

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = kMinVocab;
  int max_seq_len = 128;
  std::uint64_t seed = 0;
};

void validate_config(const ModelConfig& cfg);

struct TensorSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;  // 1 for vectors
  std::size_t size() const { return rows * cols; }
};

// Canonical parameter order; also the checkpoint serialization order.
std::vector<TensorSpec> param_layout(const ModelConfig& cfg);

// Pre-norm decoder-only transformer: token + learned positional
// embeddings, per layer {LN, causal multi-head attention, LN, GELU MLP},
// final LN and an untied bias-free output head. Parameters are doubles in
// memory and 32-bit floats on disk.
struct ModelState {
  ModelConfig config;
  std::vector<std::vector<double>> params;  // aligned with param_layout
  std::int64_t step_count = 0;
};

ModelState init_model(const ModelConfig& cfg);
ModelState zero_model(const ModelConfig& cfg);
std::size_t param_count(const ModelState& model);

struct ForwardResult {
  std::size_t seq_len = 0;
  int vocab_size = 0;
  int d_model = 0;
  std::vector<double> logits;               // seq x vocab, row-major
  std::vector<std::vector<double>> hidden;  // per layer, seq x d_model

  const double* logits_row(std::size_t t) const {
    return logits.data() + t * vocab_size;
  }
};

// Strict forward pass: requires 2 <= len <= max_seq_len and ids within
// the vocabulary.
ForwardResult forward(const ModelState& model, std::span<const int> ids);

struct TokenScores {
  std::vector<int> token_ids;
  std::vector<double> log_probs;  // next-token log-probs, len = tokens - 1
  bool truncated = false;         // input exceeded max_seq_len (head kept)
};

// Log-probabilities of each next token. Baseline attacks score the raw
// text; a template is applied only when one is passed.
TokenScores token_log_probs(const ModelState& model, const std::string& text,
                            const corpus::PromptTemplate* tmpl = nullptr);

// Mean next-token negative log-likelihood.
double loss(const ModelState& model, const std::string& text);
double perplexity(const ModelState& model, const std::string& text);

struct ActivationVector {
  std::vector<double> values;
  int layer = 0;  // 1-based
  std::string source_sample_id;
};

// Hidden state of the final token of the rendered prompt after block
// `layer` (1-based).
ActivationVector extract_activation(const ModelState& model,
                                    const std::string& text,
                                    const corpus::PromptTemplate& tmpl,
                                    int layer,
                                    const std::string& sample_id = "");

struct Gradients {
  std::vector<std::vector<double>> tensors;  // aligned with param_layout
};

Gradients zero_gradients(const ModelConfig& cfg);

// Token-mean NLL over the batch with gradients accumulated into `grads`
// (zeroed first). Exposed for the finite-difference gradient check.
double batch_loss_and_gradients(const ModelState& model,
                                const std::vector<std::vector<int>>& batch,
                                Gradients& grads);

struct TrainHyper {
  int steps = 0;
  int batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int max_seq_len = 0;  // 0 = use config.max_seq_len
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
};

// Adam over the canonical parameter list (beta1=0.9, beta2=0.999,
// eps=1e-8, bias-corrected).
class AdamOptimizer {
 public:
  AdamOptimizer(const ModelConfig& cfg, double lr);
  void step(ModelState& model, const Gradients& grads);
  int steps_taken() const { return t_; }

 private:
  double lr_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Seeded-initialization pretraining with shuffled mini-batches and
// next-token loss. Deterministic given (cfg.seed, hyper, corpus order).
ModelState pretrain(const ModelConfig& cfg,
                    const std::vector<std::string>& corpus,
                    const TrainHyper& hyper,
                    std::vector<TrainLogEntry>* log = nullptr);

// Member injection: fine-tunes a copy on the templated member texts, all
// members in one batch, exactly 2 epochs.
ModelState train_proxy(const ModelState& model,
                       const std::vector<corpus::Sample>& members,
                       const corpus::PromptTemplate& tmpl, double lr);

// Versioned binary checkpoint: magic, JSON header (config, step count,
// tensor table), then flat little-endian float32 tensors in layout order.
std::vector<std::uint8_t> serialize_checkpoint(const ModelState& model);
void save_checkpoint(const ModelState& model,
                     const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);

// FNV-1a over the serialized checkpoint bytes; provenance key for score
// caching and run sidecars.
std::string model_hash(const ModelState& model);

}  // namespace mia::lm
