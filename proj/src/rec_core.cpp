#include "slim/rec_core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "slim/error.hpp"
#include "slim/hashing.hpp"
#include "slim/parallel.hpp"

namespace slim::rec {

using nlohmann::json;

// ---------------------------------------------------------------------------
// enum plumbing

std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::IdOnly: return "id";
    case Mode::IdText: return "id-text";
    case Mode::Slim: return "slim";
    case Mode::Agnostic: return "agnostic";
  }
  return "id";
}

std::string_view to_string(Backbone b) {
  switch (b) {
    case Backbone::Mean: return "mean";
    case Backbone::Gru: return "gru";
    case Backbone::Attention: return "attention";
  }
  return "mean";
}

std::string_view to_string(PairMode p) { return p == PairMode::AllPrefixes ? "all-prefixes" : "last-only"; }
std::string_view to_string(BackboneInput b) { return b == BackboneInput::Fused ? "fused" : "id"; }
std::string_view to_string(OptimizerKind o) { return o == OptimizerKind::Sgd ? "sgd" : "adam"; }

Mode parse_mode(std::string_view s) {
  if (s == "id" || s == "id-only") return Mode::IdOnly;
  if (s == "id-text") return Mode::IdText;
  if (s == "slim") return Mode::Slim;
  if (s == "agnostic") return Mode::Agnostic;
  throw InputError("unknown mode '" + std::string(s) + "' (expected id, id-text, slim or agnostic)");
}

Backbone parse_backbone(std::string_view s) {
  if (s == "mean") return Backbone::Mean;
  if (s == "gru") return Backbone::Gru;
  if (s == "attention") return Backbone::Attention;
  throw InputError("unknown backbone '" + std::string(s) + "' (expected mean, gru or attention)");
}

PairMode parse_pair_mode(std::string_view s) {
  if (s == "all-prefixes") return PairMode::AllPrefixes;
  if (s == "last-only") return PairMode::LastOnly;
  throw InputError("unknown pair mode '" + std::string(s) + "'");
}

BackboneInput parse_backbone_input(std::string_view s) {
  if (s == "fused") return BackboneInput::Fused;
  if (s == "id") return BackboneInput::Id;
  throw InputError("unknown backbone input '" + std::string(s) + "'");
}

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw InputError("unknown optimizer '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  if (id_dim < 1) throw InputError("id_dim must be >= 1");
  if (max_seq_len < 1) throw InputError("max_seq_len must be >= 1");
  if (uses_item_text() && text_dim < 1) throw InputError("text_dim must be >= 1");
  if (mode == Mode::Agnostic && match_dim < 1) throw InputError("match_dim must be >= 1");
  if (batch_size < 1) throw InputError("batch_size must be >= 1");
  if (!(learning_rate >= 0)) throw InputError("learning rate must be >= 0");
}

json ModelConfig::to_json() const {
  return {{"mode", to_string(mode)},
          {"backbone", to_string(backbone)},
          {"id_dim", id_dim},
          {"text_dim", text_dim},
          {"match_dim", match_dim},
          {"max_seq_len", max_seq_len},
          {"learning_rate", learning_rate},
          {"epochs", epochs},
          {"negatives", negatives},
          {"batch_size", batch_size},
          {"seed", seed},
          {"pairs", to_string(pairs)},
          {"backbone_input", to_string(backbone_input)},
          {"optimizer", to_string(optimizer)}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.mode = parse_mode(j.at("mode").get<std::string>());
  c.backbone = parse_backbone(j.at("backbone").get<std::string>());
  c.id_dim = j.at("id_dim").get<std::size_t>();
  c.text_dim = j.at("text_dim").get<std::size_t>();
  c.match_dim = j.at("match_dim").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.negatives = j.at("negatives").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.pairs = parse_pair_mode(j.at("pairs").get<std::string>());
  c.backbone_input = parse_backbone_input(j.at("backbone_input").get<std::string>());
  c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  return c;
}

// ---------------------------------------------------------------------------
// parameters

ParameterSet ParameterSet::allocate(const ModelConfig& cfg, std::size_t n_items) {
  const auto d = cfg.id_dim;
  const auto dt = cfg.text_dim;
  const auto dm = cfg.match_dim;
  ParameterSet p;
  p.item_id = Tensor("item_id", n_items, d);
  p.gru_wz = Tensor("gru_wz", d, d);
  p.gru_uz = Tensor("gru_uz", d, d);
  p.gru_bz = Tensor("gru_bz", 1, d);
  p.gru_wr = Tensor("gru_wr", d, d);
  p.gru_ur = Tensor("gru_ur", d, d);
  p.gru_br = Tensor("gru_br", 1, d);
  p.gru_wn = Tensor("gru_wn", d, d);
  p.gru_un = Tensor("gru_un", d, d);
  p.gru_bn = Tensor("gru_bn", 1, d);
  p.attn_pos = Tensor("attn_pos", cfg.max_seq_len, d);
  p.attn_wq = Tensor("attn_wq", d, d);
  p.attn_wk = Tensor("attn_wk", d, d);
  p.attn_wv = Tensor("attn_wv", d, d);
  p.attn_wo = Tensor("attn_wo", d, d);
  p.gl_w = Tensor("gl_w", d, dt);
  p.gl_b = Tensor("gl_b", 1, d);
  p.gf_w = Tensor("gf_w", d, 2 * d);
  p.gf_b = Tensor("gf_b", 1, d);
  p.gt_w = Tensor("gt_w", dm, dt);
  p.gt_b = Tensor("gt_b", 1, dm);
  return p;
}

ParameterSet ParameterSet::init(const ModelConfig& cfg, std::size_t n_items) {
  auto p = allocate(cfg, n_items);
  Rng rng(derive_seed(cfg.seed, "init"));
  auto fill = [&](Tensor& t, std::size_t fan_in) {
    const double a = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    for (double& x : t.data) x = uniform_real(rng, -a, a);
  };
  const auto d = cfg.id_dim;
  fill(p.item_id, d);
  for (Tensor* t : {&p.gru_wz, &p.gru_uz, &p.gru_bz, &p.gru_wr, &p.gru_ur, &p.gru_br, &p.gru_wn, &p.gru_un,
                    &p.gru_bn, &p.attn_pos, &p.attn_wq, &p.attn_wk, &p.attn_wv, &p.attn_wo}) {
    fill(*t, d);
  }
  fill(p.gl_w, cfg.text_dim);
  fill(p.gl_b, cfg.text_dim);
  fill(p.gf_w, 2 * d);
  fill(p.gf_b, 2 * d);
  fill(p.gt_w, cfg.text_dim);
  fill(p.gt_b, cfg.text_dim);
  return p;
}

std::vector<Tensor*> ParameterSet::tensors() {
  return {&item_id, &gru_wz, &gru_uz, &gru_bz, &gru_wr, &gru_ur, &gru_br, &gru_wn, &gru_un, &gru_bn, &attn_pos,
          &attn_wq, &attn_wk, &attn_wv, &attn_wo, &gl_w, &gl_b, &gf_w, &gf_b, &gt_w, &gt_b};
}

std::vector<const Tensor*> ParameterSet::tensors() const {
  auto mut = const_cast<ParameterSet*>(this)->tensors();
  return {mut.begin(), mut.end()};
}

void ParameterSet::set_zero() {
  for (Tensor* t : tensors()) std::fill(t->data.begin(), t->data.end(), 0.0);
}

bool ParameterSet::all_finite() const {
  for (const Tensor* t : tensors()) {
    for (double x : t->data) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  const auto a = tensors();
  const auto b = other.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->rows != b[i]->rows || a[i]->cols != b[i]->cols) return false;
    if (std::memcmp(a[i]->data.data(), b[i]->data.data(), a[i]->data.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// dense helpers

namespace {

using Vec = std::vector<double>;

// y = W x + b (b may be null)
void affine(const Tensor& w, const Tensor* b, const double* x, double* y) {
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* wr = w.row(r);
    double acc = b ? b->data[r] : 0.0;
    for (std::size_t c = 0; c < w.cols; ++c) acc += wr[c] * x[c];
    y[r] = acc;
  }
}

// dx += Wᵀ dy
void affine_backward_input(const Tensor& w, const double* dy, double* dx) {
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* wr = w.row(r);
    const double g = dy[r];
    if (g == 0.0) continue;
    for (std::size_t c = 0; c < w.cols; ++c) dx[c] += wr[c] * g;
  }
}

// dW += dy xᵀ, db += dy
void affine_backward_params(Tensor& dw, Tensor* db, const double* dy, const double* x) {
  for (std::size_t r = 0; r < dw.rows; ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    double* gr = dw.row(r);
    for (std::size_t c = 0; c < dw.cols; ++c) gr[c] += g * x[c];
    if (db) db->data[r] += g;
  }
}

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// --- item encoder -----------------------------------------------------------

struct ItemForward {
  Vec z;
  Vec fused_in;  // [g_l(text); z_id] in fused modes
};

ItemForward item_forward(const ParameterSet& p, const ModelConfig& cfg, const ItemRef& item) {
  ItemForward out;
  const auto d = cfg.id_dim;
  switch (cfg.mode) {
    case Mode::IdOnly: {
      if (item.id < 0) throw UnscorableError("item is outside the ID vocabulary");
      const double* row = p.item_id.row(static_cast<std::size_t>(item.id));
      out.z.assign(row, row + d);
      break;
    }
    case Mode::IdText:
    case Mode::Slim: {
      if (!item.text) throw UnscorableError("item has no text vector");
      out.fused_in.assign(2 * d, 0.0);
      affine(p.gl_w, &p.gl_b, item.text, out.fused_in.data());
      if (item.id >= 0) {
        const double* row = p.item_id.row(static_cast<std::size_t>(item.id));
        std::copy(row, row + d, out.fused_in.begin() + static_cast<std::ptrdiff_t>(d));
      }
      out.z.assign(d, 0.0);
      affine(p.gf_w, &p.gf_b, out.fused_in.data(), out.z.data());
      break;
    }
    case Mode::Agnostic: {
      if (!item.text) throw UnscorableError("item has no text vector");
      out.z.assign(cfg.match_dim, 0.0);
      affine(p.gt_w, &p.gt_b, item.text, out.z.data());
      break;
    }
  }
  return out;
}

void item_backward(const ParameterSet& p, const ModelConfig& cfg, const ItemRef& item, const ItemForward& fw,
                   const double* dz, ParameterSet& g) {
  const auto d = cfg.id_dim;
  switch (cfg.mode) {
    case Mode::IdOnly:
      axpy(1.0, dz, g.item_id.row(static_cast<std::size_t>(item.id)), d);
      break;
    case Mode::IdText:
    case Mode::Slim: {
      affine_backward_params(g.gf_w, &g.gf_b, dz, fw.fused_in.data());
      Vec du(2 * d, 0.0);
      affine_backward_input(p.gf_w, dz, du.data());
      affine_backward_params(g.gl_w, &g.gl_b, du.data(), item.text);
      if (item.id >= 0) axpy(1.0, du.data() + d, g.item_id.row(static_cast<std::size_t>(item.id)), d);
      break;
    }
    case Mode::Agnostic:
      affine_backward_params(g.gt_w, &g.gt_b, dz, item.text);
      break;
  }
}

// --- sequence encoder -------------------------------------------------------

struct SeqForward {
  std::vector<Vec> x;  // backbone inputs, most recent last
  Vec h;               // backbone output
  // GRU
  std::vector<Vec> hprev, zg, rg, ng, rh;
  // attention
  std::size_t pos_offset = 0;
  std::vector<Vec> e, k, v;
  Vec q, alpha, c;
  // slim fusion
  Vec fused_in;
  Vec s;
};

double sig(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

void gru_forward(const ParameterSet& p, std::size_t d, SeqForward& f) {
  Vec h(d, 0.0), az(d), ar(d), an(d), tmp(d);
  for (const auto& x : f.x) {
    f.hprev.push_back(h);
    affine(p.gru_wz, &p.gru_bz, x.data(), az.data());
    affine(p.gru_uz, nullptr, h.data(), tmp.data());
    for (std::size_t i = 0; i < d; ++i) az[i] = sig(az[i] + tmp[i]);
    affine(p.gru_wr, &p.gru_br, x.data(), ar.data());
    affine(p.gru_ur, nullptr, h.data(), tmp.data());
    for (std::size_t i = 0; i < d; ++i) ar[i] = sig(ar[i] + tmp[i]);
    Vec rh(d);
    for (std::size_t i = 0; i < d; ++i) rh[i] = ar[i] * h[i];
    affine(p.gru_wn, &p.gru_bn, x.data(), an.data());
    affine(p.gru_un, nullptr, rh.data(), tmp.data());
    for (std::size_t i = 0; i < d; ++i) an[i] = std::tanh(an[i] + tmp[i]);
    for (std::size_t i = 0; i < d; ++i) h[i] = (1.0 - az[i]) * an[i] + az[i] * h[i];
    f.zg.push_back(az);
    f.rg.push_back(ar);
    f.ng.push_back(an);
    f.rh.push_back(std::move(rh));
  }
  f.h = h;
}

void gru_backward(const ParameterSet& p, std::size_t d, const SeqForward& f, const double* dh_out, ParameterSet& g,
                  std::vector<Vec>& dx) {
  Vec dh(dh_out, dh_out + d), dhp(d), da(d), drh(d);
  for (std::size_t t = f.x.size(); t-- > 0;) {
    const auto& x = f.x[t];
    const auto& hp = f.hprev[t];
    const auto& z = f.zg[t];
    const auto& r = f.rg[t];
    const auto& n = f.ng[t];
    std::fill(dhp.begin(), dhp.end(), 0.0);
    // candidate
    for (std::size_t i = 0; i < d; ++i) {
      dhp[i] = dh[i] * z[i];
      da[i] = dh[i] * (1.0 - z[i]) * (1.0 - n[i] * n[i]);
    }
    affine_backward_params(g.gru_wn, &g.gru_bn, da.data(), x.data());
    affine_backward_input(p.gru_wn, da.data(), dx[t].data());
    affine_backward_params(g.gru_un, nullptr, da.data(), f.rh[t].data());
    std::fill(drh.begin(), drh.end(), 0.0);
    affine_backward_input(p.gru_un, da.data(), drh.data());
    Vec dr(d);
    for (std::size_t i = 0; i < d; ++i) {
      dr[i] = drh[i] * hp[i];
      dhp[i] += drh[i] * r[i];
    }
    // update gate
    for (std::size_t i = 0; i < d; ++i) da[i] = dh[i] * (hp[i] - n[i]) * z[i] * (1.0 - z[i]);
    affine_backward_params(g.gru_wz, &g.gru_bz, da.data(), x.data());
    affine_backward_params(g.gru_uz, nullptr, da.data(), hp.data());
    affine_backward_input(p.gru_wz, da.data(), dx[t].data());
    affine_backward_input(p.gru_uz, da.data(), dhp.data());
    // reset gate
    for (std::size_t i = 0; i < d; ++i) da[i] = dr[i] * r[i] * (1.0 - r[i]);
    affine_backward_params(g.gru_wr, &g.gru_br, da.data(), x.data());
    affine_backward_params(g.gru_ur, nullptr, da.data(), hp.data());
    affine_backward_input(p.gru_wr, da.data(), dx[t].data());
    affine_backward_input(p.gru_ur, da.data(), dhp.data());
    dh = dhp;
  }
}

void attention_forward(const ParameterSet& p, std::size_t d, std::size_t max_len, SeqForward& f) {
  const auto n = f.x.size();
  f.pos_offset = max_len - n;  // most recent item sits at the last position
  f.e.resize(n);
  f.k.resize(n);
  f.v.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    f.e[j] = f.x[j];
    axpy(1.0, p.attn_pos.row(f.pos_offset + j), f.e[j].data(), d);
    f.k[j].assign(d, 0.0);
    f.v[j].assign(d, 0.0);
    affine(p.attn_wk, nullptr, f.e[j].data(), f.k[j].data());
    affine(p.attn_wv, nullptr, f.e[j].data(), f.v[j].data());
  }
  f.q.assign(d, 0.0);
  affine(p.attn_wq, nullptr, f.e[n - 1].data(), f.q.data());
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  f.alpha.assign(n, 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    f.alpha[j] = dot(f.q.data(), f.k[j].data(), d) * scale;
    mx = std::max(mx, f.alpha[j]);
  }
  double z = 0.0;
  for (double& a : f.alpha) z += (a = std::exp(a - mx));
  for (double& a : f.alpha) a /= z;
  f.c.assign(d, 0.0);
  for (std::size_t j = 0; j < n; ++j) axpy(f.alpha[j], f.v[j].data(), f.c.data(), d);
  f.h = f.e[n - 1];
  Vec o(d);
  affine(p.attn_wo, nullptr, f.c.data(), o.data());
  axpy(1.0, o.data(), f.h.data(), d);
}

void attention_backward(const ParameterSet& p, std::size_t d, const SeqForward& f, const double* dh, ParameterSet& g,
                        std::vector<Vec>& dx) {
  const auto n = f.x.size();
  std::vector<Vec> de(n, Vec(d, 0.0));
  axpy(1.0, dh, de[n - 1].data(), d);
  affine_backward_params(g.attn_wo, nullptr, dh, f.c.data());
  Vec dc(d, 0.0);
  affine_backward_input(p.attn_wo, dh, dc.data());

  Vec dalpha(n);
  double weighted = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    dalpha[j] = dot(dc.data(), f.v[j].data(), d);
    weighted += f.alpha[j] * dalpha[j];
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Vec dq(d, 0.0), dk(d), dv(d);
  for (std::size_t j = 0; j < n; ++j) {
    const double dscore = f.alpha[j] * (dalpha[j] - weighted) * scale;
    axpy(dscore, f.k[j].data(), dq.data(), d);
    for (std::size_t i = 0; i < d; ++i) {
      dk[i] = dscore * f.q[i];
      dv[i] = f.alpha[j] * dc[i];
    }
    affine_backward_params(g.attn_wk, nullptr, dk.data(), f.e[j].data());
    affine_backward_input(p.attn_wk, dk.data(), de[j].data());
    affine_backward_params(g.attn_wv, nullptr, dv.data(), f.e[j].data());
    affine_backward_input(p.attn_wv, dv.data(), de[j].data());
  }
  affine_backward_params(g.attn_wq, nullptr, dq.data(), f.e[n - 1].data());
  affine_backward_input(p.attn_wq, dq.data(), de[n - 1].data());
  for (std::size_t j = 0; j < n; ++j) {
    axpy(1.0, de[j].data(), g.attn_pos.row(f.pos_offset + j), d);
    axpy(1.0, de[j].data(), dx[j].data(), d);
  }
}

SeqForward seq_forward(const ParameterSet& p, const ModelConfig& cfg, std::vector<Vec> inputs,
                       const double* rationale) {
  SeqForward f;
  if (cfg.mode == Mode::Agnostic) {
    if (!rationale) throw UnscorableError("agnostic mode needs a rationale vector");
    f.s.assign(cfg.match_dim, 0.0);
    affine(p.gt_w, &p.gt_b, rationale, f.s.data());
    return f;
  }
  if (inputs.empty()) throw PreconditionError("cannot encode an empty sequence");
  if (inputs.size() > cfg.max_seq_len) {
    inputs.erase(inputs.begin(), inputs.end() - static_cast<std::ptrdiff_t>(cfg.max_seq_len));
  }
  f.x = std::move(inputs);
  const auto d = cfg.id_dim;
  switch (cfg.backbone) {
    case Backbone::Mean: {
      f.h.assign(d, 0.0);
      for (const auto& x : f.x) axpy(1.0, x.data(), f.h.data(), d);
      for (double& v : f.h) v /= static_cast<double>(f.x.size());
      break;
    }
    case Backbone::Gru: gru_forward(p, d, f); break;
    case Backbone::Attention: attention_forward(p, d, cfg.max_seq_len, f); break;
  }
  if (cfg.mode == Mode::Slim) {
    if (!rationale) throw UnscorableError("slim mode needs a rationale vector");
    f.fused_in.assign(2 * d, 0.0);
    affine(p.gl_w, &p.gl_b, rationale, f.fused_in.data());
    std::copy(f.h.begin(), f.h.end(), f.fused_in.begin() + static_cast<std::ptrdiff_t>(d));
    f.s.assign(d, 0.0);
    affine(p.gf_w, &p.gf_b, f.fused_in.data(), f.s.data());
  } else {
    f.s = f.h;
  }
  return f;
}

// Returns d(loss)/d(inputs) in `dx` (same shape as f.x).
void seq_backward(const ParameterSet& p, const ModelConfig& cfg, const SeqForward& f, const double* rationale,
                  const double* ds, ParameterSet& g, std::vector<Vec>& dx) {
  if (cfg.mode == Mode::Agnostic) {
    affine_backward_params(g.gt_w, &g.gt_b, ds, rationale);
    dx.clear();
    return;
  }
  const auto d = cfg.id_dim;
  Vec dh(d, 0.0);
  if (cfg.mode == Mode::Slim) {
    affine_backward_params(g.gf_w, &g.gf_b, ds, f.fused_in.data());
    Vec du(2 * d, 0.0);
    affine_backward_input(p.gf_w, ds, du.data());
    affine_backward_params(g.gl_w, &g.gl_b, du.data(), rationale);
    std::copy(du.begin() + static_cast<std::ptrdiff_t>(d), du.end(), dh.begin());
  } else {
    std::copy(ds, ds + d, dh.begin());
  }
  dx.assign(f.x.size(), Vec(d, 0.0));
  switch (cfg.backbone) {
    case Backbone::Mean: {
      const double inv = 1.0 / static_cast<double>(f.x.size());
      for (auto& v : dx) axpy(inv, dh.data(), v.data(), d);
      break;
    }
    case Backbone::Gru: gru_backward(p, d, f, dh.data(), g, dx); break;
    case Backbone::Attention: attention_backward(p, d, f, dh.data(), g, dx); break;
  }
}

// Whether the backbone reads raw ID rows instead of the fused item representation.
bool backbone_reads_id(const ModelConfig& cfg) {
  return (cfg.mode == Mode::IdText || cfg.mode == Mode::Slim) && cfg.backbone_input == BackboneInput::Id;
}

}  // namespace

// ---------------------------------------------------------------------------
// public forward ops

std::vector<double> item_encode(const ParameterSet& params, const ModelConfig& cfg, const ItemRef& item) {
  return item_forward(params, cfg, item).z;
}

std::vector<double> seq_encode(const ParameterSet& params, const ModelConfig& cfg,
                               const std::vector<std::vector<double>>& item_reps, const double* rationale) {
  return seq_forward(params, cfg, item_reps, rationale).s;
}

double sigmoid(double x) { return sig(x); }

double predict_score(std::span<const double> s, std::span<const double> z) {
  if (s.size() != z.size()) throw PreconditionError("predict_score: dimension mismatch");
  return sig(dot(s.data(), z.data(), s.size()));
}

double bce_with_logit(double logit, int label) { return softplus(logit) - (label ? logit : 0.0); }

double bce_loss(double probability, int label) {
  constexpr double kEps = 1e-300;
  const double p = std::clamp(probability, kEps, 1.0 - 1e-16);
  return label ? -std::log(p) : -std::log1p(-p);
}

// ---------------------------------------------------------------------------
// batch loss + gradient

double batch_loss(const ParameterSet& params, const ModelConfig& cfg, std::span<const Example> batch,
                  ParameterSet* grad) {
  struct Slot {
    ItemRef ref;
    ItemForward fw;
    Vec dz;
  };
  std::map<std::pair<std::int64_t, const double*>, std::size_t> slot_of;
  std::vector<Slot> slots;
  auto slot = [&](const ItemRef& ref) -> std::size_t {
    const auto key = std::make_pair(ref.id, ref.id >= 0 ? nullptr : ref.text);
    auto it = slot_of.find(key);
    if (it != slot_of.end()) return it->second;
    Slot s{ref, item_forward(params, cfg, ref), {}};
    s.dz.assign(s.fw.z.size(), 0.0);
    slots.push_back(std::move(s));
    slot_of.emplace(key, slots.size() - 1);
    return slots.size() - 1;
  };

  std::size_t terms = 0;
  for (const auto& ex : batch) {
    if (ex.candidates.size() != ex.labels.size()) throw PreconditionError("candidates and labels differ in length");
    terms += ex.candidates.size();
  }
  if (terms == 0) return 0.0;
  const double inv_terms = 1.0 / static_cast<double>(terms);
  const bool read_id = backbone_reads_id(cfg);
  const auto rep = cfg.rep_dim();
  const auto d = cfg.id_dim;

  double loss = 0.0;
  for (const auto& ex : batch) {
    // Backbone inputs.
    std::vector<ItemRef> hist = ex.history;
    if (hist.size() > cfg.max_seq_len) hist.erase(hist.begin(), hist.end() - static_cast<std::ptrdiff_t>(cfg.max_seq_len));
    std::vector<Vec> inputs;
    std::vector<std::size_t> input_slots;
    if (cfg.mode != Mode::Agnostic) {
      for (const auto& h : hist) {
        if (read_id) {
          if (h.id < 0) throw UnscorableError("history item outside the ID vocabulary");
          const double* row = params.item_id.row(static_cast<std::size_t>(h.id));
          inputs.emplace_back(row, row + d);
        } else {
          const auto si = slot(h);
          input_slots.push_back(si);
          inputs.push_back(slots[si].fw.z);
        }
      }
    }
    const auto sf = seq_forward(params, cfg, std::move(inputs), ex.rationale);
    Vec ds(rep, 0.0);
    for (std::size_t c = 0; c < ex.candidates.size(); ++c) {
      const auto si = slot(ex.candidates[c]);
      const double logit = dot(sf.s.data(), slots[si].fw.z.data(), rep);
      loss += bce_with_logit(logit, ex.labels[c]);
      if (grad) {
        const double gl = (sig(logit) - (ex.labels[c] ? 1.0 : 0.0)) * inv_terms;
        axpy(gl, slots[si].fw.z.data(), ds.data(), rep);
        axpy(gl, sf.s.data(), slots[si].dz.data(), rep);
      }
    }
    if (grad) {
      std::vector<Vec> dx;
      seq_backward(params, cfg, sf, ex.rationale, ds.data(), *grad, dx);
      for (std::size_t j = 0; j < dx.size(); ++j) {
        if (read_id) {
          axpy(1.0, dx[j].data(), grad->item_id.row(static_cast<std::size_t>(hist[j].id)), d);
        } else {
          axpy(1.0, dx[j].data(), slots[input_slots[j]].dz.data(), rep);
        }
      }
    }
  }
  if (grad) {
    for (const auto& s : slots) item_backward(params, cfg, s.ref, s.fw, s.dz.data(), *grad);
  }
  return loss * inv_terms;
}

// ---------------------------------------------------------------------------
// vocabulary

ItemVocabulary::ItemVocabulary(std::vector<std::string> ids) : ids_(std::move(ids)) {
  std::sort(ids_.begin(), ids_.end());
  ids_.erase(std::unique(ids_.begin(), ids_.end()), ids_.end());
  for (std::size_t i = 0; i < ids_.size(); ++i) index_.emplace(ids_[i], static_cast<std::int64_t>(i));
}

std::int64_t ItemVocabulary::index(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? -1 : it->second;
}

// ---------------------------------------------------------------------------
// training

namespace {

class Optimizer {
 public:
  Optimizer(const ModelConfig& cfg, const ParameterSet& like) : cfg_(cfg) {
    if (cfg.optimizer == OptimizerKind::Adam) {
      m_ = like;
      v_ = like;
      m_.set_zero();
      v_.set_zero();
    }
  }

  void step(ParameterSet& params, const ParameterSet& grad) {
    const double lr = cfg_.learning_rate;
    auto p = params.tensors();
    auto g = grad.tensors();
    if (cfg_.optimizer == OptimizerKind::Sgd) {
      for (std::size_t t = 0; t < p.size(); ++t) {
        auto& pd = p[t]->data;
        const auto& gd = g[t]->data;
        for (std::size_t i = 0; i < pd.size(); ++i) pd[i] -= lr * gd[i];
      }
      return;
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++step_;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    auto m = m_.tensors();
    auto v = v_.tensors();
    for (std::size_t t = 0; t < p.size(); ++t) {
      auto& pd = p[t]->data;
      const auto& gd = g[t]->data;
      auto& md = m[t]->data;
      auto& vd = v[t]->data;
      for (std::size_t i = 0; i < pd.size(); ++i) {
        md[i] = b1 * md[i] + (1 - b1) * gd[i];
        vd[i] = b2 * vd[i] + (1 - b2) * gd[i] * gd[i];
        pd[i] -= lr * (md[i] / c1) / (std::sqrt(vd[i] / c2) + eps);
      }
    }
  }

 private:
  const ModelConfig& cfg_;
  ParameterSet m_, v_;
  std::size_t step_ = 0;
};

struct UserData {
  std::vector<std::int64_t> train;
  std::set<std::int64_t> seen;
  const double* rationale = nullptr;
};

struct Pair {
  std::size_t user;
  std::size_t target_pos;  // history = train[0, target_pos)
};

}  // namespace

TrainResult train(const SplitDataset& split, const ItemTable& catalog, const embed::EmbeddingStore* store,
                  const ModelConfig& cfg) {
  cfg.validate();
  const auto catalog_ids = catalog.sorted_ids();
  if (catalog_ids.empty()) throw InputError("cannot train on an empty catalog");
  std::unordered_map<std::string, std::size_t> catalog_index;
  for (std::size_t c = 0; c < catalog_ids.size(); ++c) catalog_index.emplace(catalog_ids[c], c);

  ItemVocabulary vocab(catalog_ids);

  if ((cfg.uses_item_text() || cfg.uses_rationale()) && !store) {
    throw InputError("mode '" + std::string(to_string(cfg.mode)) + "' needs an embedding store");
  }
  if (store && (cfg.uses_item_text() || cfg.uses_rationale()) && store->dimension() != cfg.text_dim) {
    throw InputError("embedding store dimension " + std::to_string(store->dimension()) +
                     " does not match text_dim " + std::to_string(cfg.text_dim));
  }

  std::vector<ItemRef> refs(catalog_ids.size());
  for (std::size_t c = 0; c < catalog_ids.size(); ++c) {
    refs[c].id = vocab.index(catalog_ids[c]);
    if (cfg.uses_item_text()) {
      const auto key = embed::item_key(catalog_ids[c]);
      const auto* v = store->find(key);
      if (!v) throw ReferenceError("missing embedding key '" + key + "'", key);
      refs[c].text = v->data();
    }
  }

  std::vector<UserData> users;
  std::vector<Pair> pairs;
  for (const auto& u : split.users) {
    UserData ud;
    for (const auto& id : u.train) {
      auto it = catalog_index.find(id);
      if (it == catalog_index.end()) throw ReferenceError("train item '" + id + "' is not in the catalog", id);
      ud.train.push_back(static_cast<std::int64_t>(it->second));
      ud.seen.insert(static_cast<std::int64_t>(it->second));
    }
    if (cfg.uses_rationale()) {
      const auto key = embed::user_key(u.user);
      const auto* r = store->find(key);
      if (!r) throw ReferenceError("missing embedding key '" + key + "'", key);
      ud.rationale = r->data();
    }
    std::size_t unseen = 0;
    for (std::size_t c = 0; c < refs.size(); ++c) unseen += ud.seen.count(static_cast<std::int64_t>(c)) ? 0 : 1;
    if (cfg.negatives > 0 && unseen == 0) {
      throw SizeError("user '" + u.user + "' has interacted with every item available as a negative");
    }
    const auto m = ud.train.size();
    if (m >= 2) {
      if (cfg.pairs == PairMode::AllPrefixes) {
        for (std::size_t t = 1; t < m; ++t) pairs.push_back({users.size(), t});
      } else {
        pairs.push_back({users.size(), m - 1});
      }
    }
    users.push_back(std::move(ud));
  }

  auto ref = [&](std::int64_t c) { return refs[static_cast<std::size_t>(c)]; };
  auto sample_negative = [&](Rng& rng, const UserData& ud) -> std::int64_t {
    for (;;) {
      const auto c = static_cast<std::int64_t>(uniform_index(rng, refs.size()));
      if (!ud.seen.count(c)) return c;
    }
  };
  auto make_example = [&](const Pair& pr, Rng& rng) {
    const auto& ud = users[pr.user];
    Example ex;
    const auto begin = pr.target_pos > cfg.max_seq_len ? pr.target_pos - cfg.max_seq_len : 0;
    for (auto t = begin; t < pr.target_pos; ++t) ex.history.push_back(ref(ud.train[t]));
    ex.rationale = ud.rationale;
    ex.candidates.push_back(ref(ud.train[pr.target_pos]));
    ex.labels.push_back(1);
    for (std::size_t k = 0; k < cfg.negatives; ++k) {
      ex.candidates.push_back(ref(sample_negative(rng, ud)));
      ex.labels.push_back(0);
    }
    return ex;
  };

  // Items without a train occurrence keep a zero ID row.
  std::vector<bool> cold(vocab.size(), true);
  for (const auto& ud : users) {
    for (auto c : ud.train) cold[static_cast<std::size_t>(c)] = false;
  }
  auto zero_cold_rows = [&](Tensor& table) {
    for (std::size_t r = 0; r < cold.size(); ++r) {
      if (cold[r]) std::fill(table.row(r), table.row(r) + table.cols, 0.0);
    }
  };

  TrainResult result;
  result.vocab = vocab;
  result.params = ParameterSet::init(cfg, vocab.size());
  zero_cold_rows(result.params.item_id);
  result.pairs = pairs.size();
  if (pairs.empty()) return result;

  // Fixed probe set: every pair with one frozen negative draw, evaluated after
  // each epoch so the trace depends only on the parameters.
  std::vector<Example> probe;
  {
    Rng probe_rng(derive_seed(cfg.seed, "probe"));
    probe.reserve(pairs.size());
    for (const auto& pr : pairs) probe.push_back(make_example(pr, probe_rng));
  }
  auto probe_loss = [&] {
    double total = 0.0;
    for (std::size_t start = 0; start < probe.size(); start += cfg.batch_size) {
      const auto end = std::min(probe.size(), start + cfg.batch_size);
      std::span<const Example> b(probe.data() + start, end - start);
      total += batch_loss(result.params, cfg, b, nullptr) * static_cast<double>(end - start);
    }
    return total / static_cast<double>(probe.size());
  };

  ParameterSet grad = ParameterSet::allocate(cfg, vocab.size());
  Optimizer opt(cfg, grad);
  Rng rng(derive_seed(cfg.seed, "train"));
  std::vector<std::size_t> order(pairs.size());
  std::vector<Example> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (auto i = start; i < end; ++i) batch.push_back(make_example(pairs[order[i]], rng));
      grad.set_zero();
      const double loss = batch_loss(result.params, cfg, batch, &grad);
      if (!std::isfinite(loss)) throw DomainError("training loss became non-finite");
      zero_cold_rows(grad.item_id);
      if (cfg.learning_rate > 0) opt.step(result.params, grad);
    }
    result.loss_trace.push_back(probe_loss());
  }
  return result;
}

// ---------------------------------------------------------------------------
// gradient check

GradCheckReport grad_check(const ModelConfig& base, double tolerance) {
  ModelConfig cfg = base;
  cfg.id_dim = std::clamp<std::size_t>(base.id_dim, 1, 8);
  cfg.text_dim = std::clamp<std::size_t>(base.text_dim, 1, 8);
  cfg.match_dim = std::clamp<std::size_t>(base.match_dim, 1, 8);
  cfg.max_seq_len = std::clamp<std::size_t>(base.max_seq_len, 1, 5);
  constexpr std::size_t kItems = 7;
  constexpr double kStep = 1e-5;

  Rng rng(derive_seed(base.seed, "grad-check"));
  auto params = ParameterSet::allocate(cfg, kItems);
  for (Tensor* t : params.tensors()) {
    for (double& x : t->data) x = uniform_real(rng, -0.5, 0.5);
  }
  auto random_vec = [&](std::size_t n) {
    Vec v(n);
    for (double& x : v) x = uniform_real(rng, -1.0, 1.0);
    return v;
  };
  std::vector<Vec> item_text;
  for (std::size_t i = 0; i < kItems + 1; ++i) item_text.push_back(random_vec(cfg.text_dim));
  std::vector<Vec> rationales;
  for (std::size_t u = 0; u < 3; ++u) rationales.push_back(random_vec(cfg.text_dim));

  auto ref = [&](std::int64_t i) { return ItemRef{i, item_text[static_cast<std::size_t>(i)].data()}; };
  const ItemRef cold{-1, item_text[kItems].data()};
  const bool text_mode = cfg.uses_item_text();

  std::vector<Example> batch;
  const std::size_t lengths[] = {1, 3, cfg.max_seq_len + 1};
  for (std::size_t u = 0; u < 3; ++u) {
    Example ex;
    for (std::size_t t = 0; t < lengths[u]; ++t) ex.history.push_back(ref(static_cast<std::int64_t>((u + 2 * t) % kItems)));
    if (backbone_reads_id(cfg) || !text_mode) {
      // history must stay inside the vocabulary
    } else if (u == 1) {
      ex.history.push_back(cold);
    }
    ex.rationale = rationales[u].data();
    ex.candidates = {ref(static_cast<std::int64_t>((u + 1) % kItems)), ref(static_cast<std::int64_t>((u + 4) % kItems)),
                     ref(static_cast<std::int64_t>((u + 5) % kItems))};
    ex.labels = {1, 0, 0};
    if (text_mode) {
      ex.candidates.push_back(cold);
      ex.labels.push_back(0);
    }
    batch.push_back(std::move(ex));
  }

  auto grad = ParameterSet::allocate(cfg, kItems);
  batch_loss(params, cfg, batch, &grad);

  GradCheckReport report;
  auto p = params.tensors();
  auto g = grad.tensors();
  for (std::size_t t = 0; t < p.size(); ++t) {
    for (std::size_t i = 0; i < p[t]->data.size(); ++i) {
      const double saved = p[t]->data[i];
      p[t]->data[i] = saved + kStep;
      const double up = batch_loss(params, cfg, batch, nullptr);
      p[t]->data[i] = saved - kStep;
      const double down = batch_loss(params, cfg, batch, nullptr);
      p[t]->data[i] = saved;
      const double numeric = (up - down) / (2 * kStep);
      const double analytic = g[t]->data[i];
      const double rel = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_tensor = p[t]->name;
      }
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

// ---------------------------------------------------------------------------
// recommender

SequentialRecommender::SequentialRecommender(ModelConfig cfg, ItemVocabulary vocab, ParameterSet params)
    : cfg_(cfg), vocab_(std::move(vocab)), params_(std::move(params)) {
  cfg_.validate();
  if (params_.item_id.rows != vocab_.size()) throw InputError("parameter table does not match the vocabulary size");
  if (cfg_.mode == Mode::IdOnly) attach_store(nullptr);
}

void SequentialRecommender::attach_store(std::shared_ptr<const embed::EmbeddingStore> store) {
  store_ = std::move(store);
  item_reps_.assign(vocab_.size(), {});
  if (cfg_.uses_item_text() && !store_) return;
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    const auto r = ref(vocab_.ids()[i]);
    if (cfg_.uses_item_text() && !r.text) continue;
    item_reps_[i] = item_encode(params_, cfg_, r);
  }
}

ItemRef SequentialRecommender::ref(const std::string& item_id) const {
  ItemRef r{vocab_.index(item_id), nullptr};
  if (cfg_.uses_item_text() && store_) {
    if (const auto* v = store_->find(embed::item_key(item_id))) r.text = v->data();
  }
  return r;
}

const std::vector<double>& SequentialRecommender::cached_rep(std::int64_t row) const {
  return item_reps_[static_cast<std::size_t>(row)];
}

std::vector<double> SequentialRecommender::score(const std::string& user, const std::vector<std::string>& history,
                                                 const std::vector<std::string>& candidates) const {
  if (cfg_.uses_item_text() && !store_) throw UnscorableError("model needs an embedding store to score");
  auto rep_of = [&](const std::string& id) -> std::vector<double> {
    const auto r = ref(id);
    if (r.id >= 0 && !item_reps_[static_cast<std::size_t>(r.id)].empty()) return cached_rep(r.id);
    if (cfg_.mode == Mode::IdOnly && r.id < 0) throw UnscorableError("item '" + id + "' is outside the ID vocabulary");
    if (cfg_.uses_item_text() && !r.text) throw UnscorableError("item '" + id + "' has no text vector");
    return item_encode(params_, cfg_, r);
  };

  const double* rationale = nullptr;
  if (cfg_.uses_rationale()) {
    const auto* v = store_ ? store_->find(embed::user_key(user)) : nullptr;
    if (!v) throw UnscorableError("no rationale vector for user '" + user + "'");
    rationale = v->data();
  }

  std::vector<Vec> inputs;
  if (cfg_.mode != Mode::Agnostic) {
    const auto begin = history.size() > cfg_.max_seq_len ? history.size() - cfg_.max_seq_len : 0;
    for (auto t = begin; t < history.size(); ++t) {
      if (backbone_reads_id(cfg_)) {
        const auto idx = vocab_.index(history[t]);
        if (idx < 0) throw UnscorableError("history item '" + history[t] + "' is outside the ID vocabulary");
        const double* row = params_.item_id.row(static_cast<std::size_t>(idx));
        inputs.emplace_back(row, row + cfg_.id_dim);
      } else {
        inputs.push_back(rep_of(history[t]));
      }
    }
  }
  const auto s = seq_forward(params_, cfg_, std::move(inputs), rationale).s;
  std::vector<double> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) {
    const auto z = rep_of(c);
    out.push_back(dot(s.data(), z.data(), s.size()));
  }
  return out;
}

namespace {
constexpr const char* kMagic = "SLIM-CHECKPOINT v1";
}

void SequentialRecommender::save(const std::filesystem::path& path, const json& metadata) const {
  json header;
  header["config"] = cfg_.to_json();
  header["seed"] = cfg_.seed;
  header["items"] = vocab_.ids();
  json table = json::array();
  for (const Tensor* t : params_.tensors()) table.push_back({{"name", t->name}, {"rows", t->rows}, {"cols", t->cols}});
  header["tensors"] = table;
  header["metadata"] = metadata.is_null() ? json::object() : metadata;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write checkpoint " + path.string());
    out << kMagic << '\n' << header.dump() << '\n';
    for (const Tensor* t : params_.tensors()) {
      out.write(reinterpret_cast<const char*>(t->data.data()), static_cast<std::streamsize>(t->data.size() * sizeof(double)));
    }
    if (!out) throw InputError("checkpoint write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

SequentialRecommender SequentialRecommender::load(const std::filesystem::path& path, json* metadata) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != kMagic) throw InputError(path.string() + " is not a checkpoint");
  std::getline(in, header_line);
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    throw InputError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  const auto cfg = ModelConfig::from_json(header.at("config"));
  ItemVocabulary vocab(header.at("items").get<std::vector<std::string>>());
  auto params = ParameterSet::allocate(cfg, vocab.size());
  const auto& table = header.at("tensors");
  auto tensors = params.tensors();
  if (table.size() != tensors.size()) throw InputError("checkpoint tensor table does not match this build");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& e = table[i];
    if (e.at("name") != tensors[i]->name || e.at("rows") != tensors[i]->rows || e.at("cols") != tensors[i]->cols) {
      throw InputError("checkpoint tensor '" + e.at("name").get<std::string>() + "' has an unexpected shape");
    }
    in.read(reinterpret_cast<char*>(tensors[i]->data.data()),
            static_cast<std::streamsize>(tensors[i]->data.size() * sizeof(double)));
    if (!in) throw InputError("checkpoint " + path.string() + " is truncated");
  }
  if (metadata) *metadata = header.value("metadata", json::object());
  return SequentialRecommender(cfg, std::move(vocab), std::move(params));
}

}  // namespace slim::rec
