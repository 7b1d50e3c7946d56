#include "mia/lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mia/kernels.hpp"
#include "mia/util.hpp"

namespace mia::lm {

using nlohmann::json;

namespace {

constexpr double kLnEps = 1e-5;
constexpr char kMagic[8] = {'M', 'I', 'A', 'C', 'K', 'P', 'T', '1'};

const kernels::Ops& ops() { return kernels::active(); }

}  // namespace

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size() + 2);
  ids.push_back(kBosId);
  for (unsigned char c : text) ids.push_back(static_cast<int>(c) + kByteOffset);
  ids.push_back(kEosId);
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id == kBosId || id == kEosId) continue;
    if (id < kByteOffset || id >= kMinVocab)
      throw PreconditionError("detokenize: id out of byte range: " +
                              std::to_string(id));
    out.push_back(static_cast<char>(id - kByteOffset));
  }
  return out;
}

void validate_config(const ModelConfig& cfg) {
  if (cfg.n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (cfg.d_model < 1) throw ConfigError("d_model must be >= 1");
  if (cfg.n_heads < 1 || cfg.d_model % cfg.n_heads != 0)
    throw ConfigError("n_heads must divide d_model");
  if (cfg.d_ff < 1) throw ConfigError("d_ff must be >= 1");
  if (cfg.vocab_size < kMinVocab)
    throw ConfigError("vocab_size must be >= " + std::to_string(kMinVocab));
  if (cfg.max_seq_len < 2) throw ConfigError("max_seq_len must be >= 2");
}

std::vector<TensorSpec> param_layout(const ModelConfig& cfg) {
  const auto C = static_cast<std::size_t>(cfg.d_model);
  const auto F = static_cast<std::size_t>(cfg.d_ff);
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const auto S = static_cast<std::size_t>(cfg.max_seq_len);

  std::vector<TensorSpec> layout;
  layout.push_back({"wte", V, C});
  layout.push_back({"wpe", S, C});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    layout.push_back({p + "ln1.g", C, 1});
    layout.push_back({p + "ln1.b", C, 1});
    layout.push_back({p + "attn.wqkv", 3 * C, C});
    layout.push_back({p + "attn.bqkv", 3 * C, 1});
    layout.push_back({p + "attn.wo", C, C});
    layout.push_back({p + "attn.bo", C, 1});
    layout.push_back({p + "ln2.g", C, 1});
    layout.push_back({p + "ln2.b", C, 1});
    layout.push_back({p + "mlp.wfc", F, C});
    layout.push_back({p + "mlp.bfc", F, 1});
    layout.push_back({p + "mlp.wproj", C, F});
    layout.push_back({p + "mlp.bproj", C, 1});
  }
  layout.push_back({"lnf.g", C, 1});
  layout.push_back({"lnf.b", C, 1});
  layout.push_back({"head.w", V, C});
  return layout;
}

namespace {

// Indices into the canonical parameter list.
struct ParamIndex {
  int wte = 0, wpe = 1;
  int lnf_g, lnf_b, head;
  struct Layer {
    int ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, wfc, bfc, wproj, bproj;
  };
  std::vector<Layer> layers;

  explicit ParamIndex(const ModelConfig& cfg) {
    int idx = 2;
    layers.resize(cfg.n_layers);
    for (auto& L : layers) {
      L.ln1_g = idx++;
      L.ln1_b = idx++;
      L.wqkv = idx++;
      L.bqkv = idx++;
      L.wo = idx++;
      L.bo = idx++;
      L.ln2_g = idx++;
      L.ln2_b = idx++;
      L.wfc = idx++;
      L.bfc = idx++;
      L.wproj = idx++;
      L.bproj = idx++;
    }
    lnf_g = idx++;
    lnf_b = idx++;
    head = idx++;
  }
};

struct LayerBuffers {
  std::vector<double> ln1_mean, ln1_rstd, ln1_out;
  std::vector<double> qkv;
  std::vector<double> attw;  // per-head post-softmax rows, lower triangle
  std::vector<double> atty;
  std::vector<double> resid1;
  std::vector<double> ln2_mean, ln2_rstd, ln2_out;
  std::vector<double> fc, fc_act;
  std::vector<double> out;
};

struct Workspace {
  std::size_t cap = 0;  // allocated sequence capacity
  std::size_t T = 0;    // current sequence length
  std::vector<double> x0;
  std::vector<LayerBuffers> layers;
  std::vector<double> lnf_mean, lnf_rstd, lnf_out;
  std::vector<double> logits;
  // backward scratch
  std::vector<double> d_x, d_res, d_lnout, d_qkv, d_atty, d_fc, d_fcact;
  std::vector<double> d_logits;
  std::vector<double> d_attw_row;
  std::vector<double> scratch_row;

  void ensure(const ModelConfig& cfg, std::size_t seq) {
    T = seq;
    if (seq <= cap && !layers.empty()) return;
    cap = seq;
    const std::size_t C = cfg.d_model, F = cfg.d_ff, V = cfg.vocab_size;
    const std::size_t H = cfg.n_heads;
    x0.resize(cap * C);
    layers.resize(cfg.n_layers);
    for (auto& L : layers) {
      L.ln1_mean.resize(cap);
      L.ln1_rstd.resize(cap);
      L.ln1_out.resize(cap * C);
      L.qkv.resize(cap * 3 * C);
      L.attw.resize(H * cap * cap);
      L.atty.resize(cap * C);
      L.resid1.resize(cap * C);
      L.ln2_mean.resize(cap);
      L.ln2_rstd.resize(cap);
      L.ln2_out.resize(cap * C);
      L.fc.resize(cap * F);
      L.fc_act.resize(cap * F);
      L.out.resize(cap * C);
    }
    lnf_mean.resize(cap);
    lnf_rstd.resize(cap);
    lnf_out.resize(cap * C);
    logits.resize(cap * V);
    d_x.resize(cap * C);
    d_res.resize(cap * C);
    d_lnout.resize(cap * C);
    d_qkv.resize(cap * 3 * C);
    d_atty.resize(cap * C);
    d_fc.resize(cap * F);
    d_fcact.resize(cap * F);
    d_logits.resize(cap * V);
    d_attw_row.resize(cap);
    scratch_row.resize(std::max(C, F));
  }
};

void check_ids(const ModelConfig& cfg, std::span<const int> ids) {
  if (ids.size() < 2)
    throw PreconditionError("sequence too short: need at least 2 tokens");
  if (ids.size() > static_cast<std::size_t>(cfg.max_seq_len))
    throw PreconditionError("sequence length " + std::to_string(ids.size()) +
                            " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
  for (int id : ids) {
    if (id < 0 || id >= cfg.vocab_size)
      throw PreconditionError("token id " + std::to_string(id) +
                              " outside vocabulary of size " +
                              std::to_string(cfg.vocab_size));
  }
}

void layernorm_rows(const double* x, const double* g, const double* b,
                    double* out, double* means, double* rstds, std::size_t T,
                    std::size_t C) {
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = x + t * C;
    double* orow = out + t * C;
    const double mean = ops().reduce_sum(row, C) / static_cast<double>(C);
    double var = 0.0;
    for (std::size_t i = 0; i < C; ++i) {
      const double d = row[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    for (std::size_t i = 0; i < C; ++i) {
      orow[i] = (row[i] - mean) * rstd * g[i] + b[i];
    }
    means[t] = mean;
    rstds[t] = rstd;
  }
}

// dx += layernorm backward; dg/db accumulate.
void layernorm_backward_rows(const double* x, const double* means,
                             const double* rstds, const double* g,
                             const double* dout, double* dx, double* dg,
                             double* db, std::size_t T, std::size_t C,
                             double* scratch) {
  for (std::size_t t = 0; t < T; ++t) {
    const double* xrow = x + t * C;
    const double* drow = dout + t * C;
    double* dxrow = dx + t * C;
    const double mean = means[t];
    const double rstd = rstds[t];
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < C; ++i) {
      const double n = (xrow[i] - mean) * rstd;
      const double dn = drow[i] * g[i];
      scratch[i] = dn;
      m1 += dn;
      m2 += dn * n;
      dg[i] += drow[i] * n;
      db[i] += drow[i];
    }
    m1 /= static_cast<double>(C);
    m2 /= static_cast<double>(C);
    for (std::size_t i = 0; i < C; ++i) {
      const double n = (xrow[i] - mean) * rstd;
      dxrow[i] += rstd * (scratch[i] - m1 - n * m2);
    }
  }
}

void add_bias_rows(double* y, const double* bias, std::size_t T,
                   std::size_t width) {
  for (std::size_t t = 0; t < T; ++t) ops().axpy(1.0, bias, y + t * width, width);
}

void bias_grad_rows(const double* dy, double* dbias, std::size_t T,
                    std::size_t width) {
  for (std::size_t t = 0; t < T; ++t)
    ops().axpy(1.0, dy + t * width, dbias, width);
}

void run_forward(const ModelState& model, std::span<const int> ids,
                 Workspace& ws) {
  const ModelConfig& cfg = model.config;
  check_ids(cfg, ids);
  const std::size_t T = ids.size();
  const std::size_t C = cfg.d_model, F = cfg.d_ff, V = cfg.vocab_size;
  const std::size_t H = cfg.n_heads, hs = C / H;
  const double inv_sqrt_hs = 1.0 / std::sqrt(static_cast<double>(hs));
  ws.ensure(cfg, T);
  const ParamIndex ix(cfg);
  const auto& P = model.params;

  for (std::size_t t = 0; t < T; ++t) {
    ops().vadd(P[ix.wte].data() + static_cast<std::size_t>(ids[t]) * C,
               P[ix.wpe].data() + t * C, ws.x0.data() + t * C, C);
  }

  const double* x = ws.x0.data();
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& L = ws.layers[l];
    const auto& pi = ix.layers[l];

    layernorm_rows(x, P[pi.ln1_g].data(), P[pi.ln1_b].data(), L.ln1_out.data(),
                   L.ln1_mean.data(), L.ln1_rstd.data(), T, C);

    ops().gemm_nt(L.ln1_out.data(), P[pi.wqkv].data(), L.qkv.data(), T, C,
                  3 * C, false);
    add_bias_rows(L.qkv.data(), P[pi.bqkv].data(), T, 3 * C);

    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* q = L.qkv.data() + t * 3 * C + h * hs;
        double* arow = L.attw.data() + (h * T + t) * T;
        for (std::size_t u = 0; u <= t; ++u) {
          const double* k = L.qkv.data() + u * 3 * C + C + h * hs;
          arow[u] = ops().dot(q, k, hs) * inv_sqrt_hs;
        }
        ops().softmax_row(arow, t + 1);
        double* orow = L.atty.data() + t * C + h * hs;
        std::memset(orow, 0, hs * sizeof(double));
        for (std::size_t u = 0; u <= t; ++u) {
          const double* v = L.qkv.data() + u * 3 * C + 2 * C + h * hs;
          ops().axpy(arow[u], v, orow, hs);
        }
      }
    }

    ops().gemm_nt(L.atty.data(), P[pi.wo].data(), L.resid1.data(), T, C, C,
                  false);
    add_bias_rows(L.resid1.data(), P[pi.bo].data(), T, C);
    ops().axpy(1.0, x, L.resid1.data(), T * C);

    layernorm_rows(L.resid1.data(), P[pi.ln2_g].data(), P[pi.ln2_b].data(),
                   L.ln2_out.data(), L.ln2_mean.data(), L.ln2_rstd.data(), T,
                   C);

    ops().gemm_nt(L.ln2_out.data(), P[pi.wfc].data(), L.fc.data(), T, C, F,
                  false);
    add_bias_rows(L.fc.data(), P[pi.bfc].data(), T, F);
    ops().gelu(L.fc.data(), L.fc_act.data(), T * F);

    ops().gemm_nt(L.fc_act.data(), P[pi.wproj].data(), L.out.data(), T, F, C,
                  false);
    add_bias_rows(L.out.data(), P[pi.bproj].data(), T, C);
    ops().axpy(1.0, L.resid1.data(), L.out.data(), T * C);

    x = L.out.data();
  }

  layernorm_rows(x, P[ix.lnf_g].data(), P[ix.lnf_b].data(), ws.lnf_out.data(),
                 ws.lnf_mean.data(), ws.lnf_rstd.data(), T, C);
  ops().gemm_nt(ws.lnf_out.data(), P[ix.head].data(), ws.logits.data(), T, C,
                V, false);
}

// Sum of next-token NLLs scaled by `norm`. When grad is true, fills
// ws.d_logits with the matching gradient.
double loss_from_logits(const ModelConfig& cfg, std::span<const int> ids,
                        Workspace& ws, double norm, bool grad) {
  const std::size_t T = ids.size();
  const std::size_t V = cfg.vocab_size;
  double total = 0.0;
  if (grad) std::memset(ws.d_logits.data(), 0, T * V * sizeof(double));
  for (std::size_t t = 0; t + 1 < T; ++t) {
    const double* row = ws.logits.data() + t * V;
    const int target = ids[t + 1];
    const double mx = ops().reduce_max(row, V);
    double sum = 0.0;
    if (grad) {
      double* prow = ws.d_logits.data() + t * V;
      for (std::size_t j = 0; j < V; ++j) {
        prow[j] = std::exp(row[j] - mx);
        sum += prow[j];
      }
      const double inv = 1.0 / sum;
      for (std::size_t j = 0; j < V; ++j) prow[j] *= inv * norm;
      prow[target] -= norm;
      total += -(row[target] - mx - std::log(sum)) * norm;
    } else {
      for (std::size_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
      total += -(row[target] - mx - std::log(sum)) * norm;
    }
  }
  return total;
}

void run_backward(const ModelState& model, std::span<const int> ids,
                  Workspace& ws, Gradients& grads) {
  const ModelConfig& cfg = model.config;
  const std::size_t T = ids.size();
  const std::size_t C = cfg.d_model, F = cfg.d_ff, V = cfg.vocab_size;
  const std::size_t H = cfg.n_heads, hs = C / H;
  const double inv_sqrt_hs = 1.0 / std::sqrt(static_cast<double>(hs));
  const ParamIndex ix(cfg);
  const auto& P = model.params;
  auto& G = grads.tensors;

  ops().gemm_tn(ws.d_logits.data(), ws.lnf_out.data(), G[ix.head].data(), V, T,
                C, true);
  ops().gemm_nn(ws.d_logits.data(), P[ix.head].data(), ws.d_x.data(), T, V, C,
                false);

  const double* x_top = cfg.n_layers > 0 ? ws.layers[cfg.n_layers - 1].out.data()
                                         : ws.x0.data();
  std::memset(ws.d_res.data(), 0, T * C * sizeof(double));
  layernorm_backward_rows(x_top, ws.lnf_mean.data(), ws.lnf_rstd.data(),
                          P[ix.lnf_g].data(), ws.d_x.data(), ws.d_res.data(),
                          G[ix.lnf_g].data(), G[ix.lnf_b].data(), T, C,
                          ws.scratch_row.data());
  std::memcpy(ws.d_x.data(), ws.d_res.data(), T * C * sizeof(double));

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    auto& L = ws.layers[l];
    const auto& pi = ix.layers[l];
    const double* x_in = l == 0 ? ws.x0.data() : ws.layers[l - 1].out.data();

    // out = resid1 + mlp(ln2(resid1)); d_x holds d_out.
    std::memcpy(ws.d_res.data(), ws.d_x.data(), T * C * sizeof(double));

    ops().gemm_tn(ws.d_x.data(), L.fc_act.data(), G[pi.wproj].data(), C, T, F,
                  true);
    bias_grad_rows(ws.d_x.data(), G[pi.bproj].data(), T, C);
    ops().gemm_nn(ws.d_x.data(), P[pi.wproj].data(), ws.d_fcact.data(), T, C,
                  F, false);
    std::memset(ws.d_fc.data(), 0, T * F * sizeof(double));
    ops().gelu_grad(L.fc.data(), ws.d_fcact.data(), ws.d_fc.data(), T * F);
    ops().gemm_tn(ws.d_fc.data(), L.ln2_out.data(), G[pi.wfc].data(), F, T, C,
                  true);
    bias_grad_rows(ws.d_fc.data(), G[pi.bfc].data(), T, F);
    ops().gemm_nn(ws.d_fc.data(), P[pi.wfc].data(), ws.d_lnout.data(), T, F, C,
                  false);
    layernorm_backward_rows(L.resid1.data(), L.ln2_mean.data(),
                            L.ln2_rstd.data(), P[pi.ln2_g].data(),
                            ws.d_lnout.data(), ws.d_res.data(),
                            G[pi.ln2_g].data(), G[pi.ln2_b].data(), T, C,
                            ws.scratch_row.data());

    // resid1 = x_in + attn(ln1(x_in)); d_res holds d_resid1.
    std::memcpy(ws.d_x.data(), ws.d_res.data(), T * C * sizeof(double));

    ops().gemm_tn(ws.d_res.data(), L.atty.data(), G[pi.wo].data(), C, T, C,
                  true);
    bias_grad_rows(ws.d_res.data(), G[pi.bo].data(), T, C);
    ops().gemm_nn(ws.d_res.data(), P[pi.wo].data(), ws.d_atty.data(), T, C, C,
                  false);

    std::memset(ws.d_qkv.data(), 0, T * 3 * C * sizeof(double));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* datty = ws.d_atty.data() + t * C + h * hs;
        const double* arow = L.attw.data() + (h * T + t) * T;
        double* drow = ws.d_attw_row.data();
        for (std::size_t u = 0; u <= t; ++u) {
          const double* v = L.qkv.data() + u * 3 * C + 2 * C + h * hs;
          drow[u] = ops().dot(datty, v, hs);
          double* dv = ws.d_qkv.data() + u * 3 * C + 2 * C + h * hs;
          ops().axpy(arow[u], datty, dv, hs);
        }
        const double s = ops().dot(arow, drow, t + 1);
        const double* q = L.qkv.data() + t * 3 * C + h * hs;
        double* dq = ws.d_qkv.data() + t * 3 * C + h * hs;
        for (std::size_t u = 0; u <= t; ++u) {
          const double dscore = arow[u] * (drow[u] - s) * inv_sqrt_hs;
          const double* k = L.qkv.data() + u * 3 * C + C + h * hs;
          double* dk = ws.d_qkv.data() + u * 3 * C + C + h * hs;
          ops().axpy(dscore, k, dq, hs);
          ops().axpy(dscore, q, dk, hs);
        }
      }
    }

    ops().gemm_tn(ws.d_qkv.data(), L.ln1_out.data(), G[pi.wqkv].data(), 3 * C,
                  T, C, true);
    bias_grad_rows(ws.d_qkv.data(), G[pi.bqkv].data(), T, 3 * C);
    ops().gemm_nn(ws.d_qkv.data(), P[pi.wqkv].data(), ws.d_lnout.data(), T,
                  3 * C, C, false);
    layernorm_backward_rows(x_in, L.ln1_mean.data(), L.ln1_rstd.data(),
                            P[pi.ln1_g].data(), ws.d_lnout.data(),
                            ws.d_x.data(), G[pi.ln1_g].data(),
                            G[pi.ln1_b].data(), T, C, ws.scratch_row.data());
  }

  for (std::size_t t = 0; t < T; ++t) {
    ops().axpy(1.0, ws.d_x.data() + t * C,
               G[ix.wte].data() + static_cast<std::size_t>(ids[t]) * C, C);
    ops().axpy(1.0, ws.d_x.data() + t * C, G[ix.wpe].data() + t * C, C);
  }
}

std::vector<int> tokenize_clipped(std::string_view text, int max_len,
                                  bool* truncated = nullptr) {
  std::vector<int> ids = tokenize(text);
  if (ids.size() > static_cast<std::size_t>(max_len)) {
    ids.resize(max_len);
    if (truncated != nullptr) *truncated = true;
  }
  return ids;
}

}  // namespace

ModelState init_model(const ModelConfig& cfg) {
  validate_config(cfg);
  ModelState model;
  model.config = cfg;
  const auto layout = param_layout(cfg);
  model.params.reserve(layout.size());
  Rng rng(cfg.seed);
  const double base_std = 0.02;
  // GPT-2 style: residual-output projections scaled down by sqrt(2L).
  const double resid_std = base_std / std::sqrt(2.0 * cfg.n_layers);
  for (const auto& spec : layout) {
    std::vector<double> data(spec.size(), 0.0);
    const bool is_gain = spec.name.ends_with(".g");
    const bool is_bias = spec.name.ends_with(".b") || spec.name.ends_with("bqkv") ||
                         spec.name.ends_with("bo") || spec.name.ends_with("bfc") ||
                         spec.name.ends_with("bproj");
    const bool is_resid_proj =
        spec.name.ends_with("attn.wo") || spec.name.ends_with("mlp.wproj");
    if (is_gain) {
      std::fill(data.begin(), data.end(), 1.0);
    } else if (!is_bias) {
      const double std_dev = is_resid_proj ? resid_std : base_std;
      for (auto& v : data) v = rng.normal() * std_dev;
    }
    model.params.push_back(std::move(data));
  }
  return model;
}

ModelState zero_model(const ModelConfig& cfg) {
  validate_config(cfg);
  ModelState model;
  model.config = cfg;
  for (const auto& spec : param_layout(cfg)) {
    model.params.emplace_back(spec.size(), 0.0);
  }
  return model;
}

std::size_t param_count(const ModelState& model) {
  std::size_t n = 0;
  for (const auto& t : model.params) n += t.size();
  return n;
}

ForwardResult forward(const ModelState& model, std::span<const int> ids) {
  Workspace ws;
  run_forward(model, ids, ws);
  const std::size_t T = ids.size();
  const std::size_t C = model.config.d_model;
  ForwardResult out;
  out.seq_len = T;
  out.vocab_size = model.config.vocab_size;
  out.d_model = model.config.d_model;
  out.logits.assign(ws.logits.begin(),
                    ws.logits.begin() + T * model.config.vocab_size);
  out.hidden.reserve(model.config.n_layers);
  for (const auto& L : ws.layers) {
    out.hidden.emplace_back(L.out.begin(), L.out.begin() + T * C);
  }
  return out;
}

TokenScores token_log_probs(const ModelState& model, const std::string& text,
                            const corpus::PromptTemplate* tmpl) {
  const std::string rendered =
      tmpl != nullptr ? corpus::render_template_text(*tmpl, text) : text;
  TokenScores scores;
  scores.token_ids =
      tokenize_clipped(rendered, model.config.max_seq_len, &scores.truncated);
  Workspace ws;
  run_forward(model, scores.token_ids, ws);
  const std::size_t T = scores.token_ids.size();
  const std::size_t V = model.config.vocab_size;
  scores.log_probs.reserve(T - 1);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    const double* row = ws.logits.data() + t * V;
    const double mx = ops().reduce_max(row, V);
    double sum = 0.0;
    for (std::size_t j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
    const int target = scores.token_ids[t + 1];
    scores.log_probs.push_back(row[target] - mx - std::log(sum));
  }
  return scores;
}

double loss(const ModelState& model, const std::string& text) {
  const TokenScores scores = token_log_probs(model, text);
  double total = 0.0;
  for (double lp : scores.log_probs) total += lp;
  return -total / static_cast<double>(scores.log_probs.size());
}

double perplexity(const ModelState& model, const std::string& text) {
  return std::exp(loss(model, text));
}

ActivationVector extract_activation(const ModelState& model,
                                    const std::string& text,
                                    const corpus::PromptTemplate& tmpl,
                                    int layer, const std::string& sample_id) {
  if (layer < 1 || layer > model.config.n_layers)
    throw PreconditionError("layer " + std::to_string(layer) +
                            " out of range [1, " +
                            std::to_string(model.config.n_layers) + "]");
  const std::string rendered = corpus::render_template_text(tmpl, text);
  const std::vector<int> ids =
      tokenize_clipped(rendered, model.config.max_seq_len);
  Workspace ws;
  run_forward(model, ids, ws);
  const std::size_t T = ids.size();
  const std::size_t C = model.config.d_model;
  const double* row = ws.layers[layer - 1].out.data() + (T - 1) * C;
  ActivationVector act;
  act.values.assign(row, row + C);
  act.layer = layer;
  act.source_sample_id = sample_id;
  return act;
}

Gradients zero_gradients(const ModelConfig& cfg) {
  Gradients g;
  for (const auto& spec : param_layout(cfg)) {
    g.tensors.emplace_back(spec.size(), 0.0);
  }
  return g;
}

double batch_loss_and_gradients(const ModelState& model,
                                const std::vector<std::vector<int>>& batch,
                                Gradients& grads) {
  if (batch.empty())
    throw PreconditionError("batch_loss_and_gradients: empty batch");
  for (auto& g : grads.tensors) std::fill(g.begin(), g.end(), 0.0);
  std::size_t total_preds = 0;
  for (const auto& seq : batch) {
    check_ids(model.config, seq);
    total_preds += seq.size() - 1;
  }
  const double norm = 1.0 / static_cast<double>(total_preds);
  double total_loss = 0.0;
  Workspace ws;
  for (const auto& seq : batch) {
    run_forward(model, seq, ws);
    total_loss += loss_from_logits(model.config, seq, ws, norm, true);
    run_backward(model, seq, ws, grads);
  }
  return total_loss;
}

AdamOptimizer::AdamOptimizer(const ModelConfig& cfg, double lr) : lr_(lr) {
  for (const auto& spec : param_layout(cfg)) {
    m_.emplace_back(spec.size(), 0.0);
    v_.emplace_back(spec.size(), 0.0);
  }
}

void AdamOptimizer::step(ModelState& model, const Gradients& grads) {
  ++t_;
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(beta1, t_);
  const double bc2 = 1.0 - std::pow(beta2, t_);
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    ops().adam_update(model.params[i].data(), grads.tensors[i].data(),
                      m_[i].data(), v_[i].data(), model.params[i].size(), lr_,
                      beta1, beta2, eps, bc1, bc2);
  }
}

ModelState pretrain(const ModelConfig& cfg,
                    const std::vector<std::string>& corpus,
                    const TrainHyper& hyper, std::vector<TrainLogEntry>* log) {
  validate_config(cfg);
  if (corpus.empty()) throw PreconditionError("pretrain: empty corpus");
  if (hyper.steps < 0) throw ConfigError("pretrain: steps must be >= 0");
  if (hyper.batch_size < 1) throw ConfigError("pretrain: batch_size must be >= 1");

  const int max_len = hyper.max_seq_len > 0
                          ? std::min(hyper.max_seq_len, cfg.max_seq_len)
                          : cfg.max_seq_len;
  std::vector<std::vector<int>> seqs;
  seqs.reserve(corpus.size());
  for (const auto& text : corpus) seqs.push_back(tokenize_clipped(text, max_len));

  ModelState model = init_model(cfg);
  if (hyper.steps == 0) return model;

  AdamOptimizer opt(cfg, hyper.lr);
  Gradients grads = zero_gradients(cfg);
  Rng rng(hyper.seed);

  const std::size_t n = seqs.size();
  const std::size_t batch =
      std::min<std::size_t>(static_cast<std::size_t>(hyper.batch_size), n);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::size_t cursor = 0;

  std::vector<std::vector<int>> minibatch(batch);
  for (int step = 1; step <= hyper.steps; ++step) {
    if (cursor + batch > n) {
      rng.shuffle(order);
      cursor = 0;
    }
    for (std::size_t b = 0; b < batch; ++b) minibatch[b] = seqs[order[cursor + b]];
    cursor += batch;

    const double step_loss = batch_loss_and_gradients(model, minibatch, grads);
    if (!std::isfinite(step_loss))
      throw DivergenceError("pretrain: non-finite loss at step " +
                            std::to_string(step));
    opt.step(model, grads);
    if (log != nullptr) log->push_back({step, step_loss});
  }
  model.step_count = hyper.steps;
  return model;
}

ModelState train_proxy(const ModelState& model,
                       const std::vector<corpus::Sample>& members,
                       const corpus::PromptTemplate& tmpl, double lr) {
  if (members.empty()) throw PreconditionError("train_proxy: empty member set");
  std::vector<std::vector<int>> batch;
  batch.reserve(members.size());
  for (const auto& m : members) {
    batch.push_back(tokenize_clipped(corpus::render_template(tmpl, m),
                                     model.config.max_seq_len));
  }
  ModelState proxy = model;
  AdamOptimizer opt(proxy.config, lr);
  Gradients grads = zero_gradients(proxy.config);
  // All members form one batch; train for exactly 2 epochs.
  for (int epoch = 1; epoch <= 2; ++epoch) {
    const double epoch_loss = batch_loss_and_gradients(proxy, batch, grads);
    if (!std::isfinite(epoch_loss))
      throw DivergenceError("train_proxy: non-finite loss at epoch " +
                            std::to_string(epoch));
    opt.step(proxy, grads);
  }
  proxy.step_count = model.step_count + 2;
  return proxy;
}

namespace {

void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  buf.push_back(v & 0xff);
  buf.push_back((v >> 8) & 0xff);
  buf.push_back((v >> 16) & 0xff);
  buf.push_back((v >> 24) & 0xff);
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ModelState& model) {
  const auto layout = param_layout(model.config);
  json header;
  header["config"] = {{"n_layers", model.config.n_layers},
                      {"d_model", model.config.d_model},
                      {"n_heads", model.config.n_heads},
                      {"d_ff", model.config.d_ff},
                      {"vocab_size", model.config.vocab_size},
                      {"max_seq_len", model.config.max_seq_len},
                      {"seed", model.config.seed}};
  header["step_count"] = model.step_count;
  header["float_width"] = 32;
  json params = json::array();
  for (const auto& spec : layout) {
    params.push_back({{"name", spec.name}, {"rows", spec.rows}, {"cols", spec.cols}});
  }
  header["params"] = params;
  const std::string hdr = header.dump();

  std::vector<std::uint8_t> buf;
  buf.insert(buf.end(), kMagic, kMagic + sizeof(kMagic));
  put_u32(buf, static_cast<std::uint32_t>(hdr.size()));
  buf.insert(buf.end(), hdr.begin(), hdr.end());
  for (const auto& tensor : model.params) {
    for (double d : tensor) {
      const float f = static_cast<float>(d);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof(bits));
      put_u32(buf, bits);
    }
  }
  return buf;
}

void save_checkpoint(const ModelState& model,
                     const std::filesystem::path& path) {
  const auto buf = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint: " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw ConfigError("checkpoint write failed: " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());

  if (buf.size() < sizeof(kMagic) + 4 ||
      std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
    throw FormatError("checkpoint: bad magic bytes in " + path.string());
  const std::uint32_t hdr_len = get_u32(buf.data() + sizeof(kMagic));
  std::size_t offset = sizeof(kMagic) + 4;
  if (buf.size() < offset + hdr_len)
    throw FormatError("checkpoint: truncated header in " + path.string());

  json header;
  try {
    header = json::parse(buf.begin() + offset, buf.begin() + offset + hdr_len);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  offset += hdr_len;

  ModelState model;
  try {
    const auto& c = header.at("config");
    model.config.n_layers = c.at("n_layers").get<int>();
    model.config.d_model = c.at("d_model").get<int>();
    model.config.n_heads = c.at("n_heads").get<int>();
    model.config.d_ff = c.at("d_ff").get<int>();
    model.config.vocab_size = c.at("vocab_size").get<int>();
    model.config.max_seq_len = c.at("max_seq_len").get<int>();
    model.config.seed = c.at("seed").get<std::uint64_t>();
    model.step_count = header.at("step_count").get<std::int64_t>();
    if (header.at("float_width").get<int>() != 32)
      throw FormatError("checkpoint: unsupported float width");
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header fields: ") + e.what());
  }
  validate_config(model.config);

  const auto layout = param_layout(model.config);
  const auto& params_json = header.at("params");
  if (!params_json.is_array() || params_json.size() != layout.size())
    throw FormatError("checkpoint: tensor table does not match config");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& p = params_json[i];
    if (p.at("name").get<std::string>() != layout[i].name ||
        p.at("rows").get<std::size_t>() != layout[i].rows ||
        p.at("cols").get<std::size_t>() != layout[i].cols)
      throw FormatError("checkpoint: tensor " + std::to_string(i) +
                        " mismatches expected layout");
  }

  for (const auto& spec : layout) {
    const std::size_t bytes = spec.size() * 4;
    if (buf.size() < offset + bytes)
      throw FormatError("checkpoint: truncated tensor data in " +
                        path.string());
    std::vector<double> data(spec.size());
    for (std::size_t j = 0; j < spec.size(); ++j) {
      const std::uint32_t bits = get_u32(buf.data() + offset + j * 4);
      float f;
      std::memcpy(&f, &bits, sizeof(f));
      if (!std::isfinite(f))
        throw FormatError("checkpoint: non-finite value in tensor " +
                          spec.name);
      data[j] = static_cast<double>(f);
    }
    offset += bytes;
    model.params.push_back(std::move(data));
  }
  if (offset != buf.size())
    throw FormatError("checkpoint: trailing bytes in " + path.string());
  return model;
}

std::string model_hash(const ModelState& model) {
  const auto buf = serialize_checkpoint(model);
  return hex64(fnv1a64(buf.data(), buf.size()));
}

}  // namespace mia::lm
