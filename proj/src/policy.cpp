#include "actflow/policy.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace actflow {

void PolicyConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("PolicyConfig: ") + name + " must be >= 1");
  };
  positive(d, "d");
  positive(n_enc_layers, "n_enc_layers");
  positive(n_dit_layers, "n_dit_layers");
  positive(n_heads, "n_heads");
  positive(chunk_len, "chunk_len");
  positive(action_dim, "action_dim");
  positive(state_dim, "state_dim");
  positive(n_views, "n_views");
  positive(view_feature_dim, "view_feature_dim");
  positive(tokens_per_view, "tokens_per_view");
  positive(vocab_size, "vocab_size");
  positive(max_lang_tokens, "max_lang_tokens");
  if (d % n_heads != 0)
    throw std::invalid_argument("PolicyConfig: d must be divisible by n_heads");
  if (d % 2 != 0)
    throw std::invalid_argument("PolicyConfig: d must be even (sinusoidal encoding pairs)");
  if (freeze_enc_layers < 0 || freeze_enc_layers > n_enc_layers)
    throw std::invalid_argument("PolicyConfig: freeze_enc_layers out of range");
}

std::vector<std::pair<std::string, std::string>> PolicyConfig::to_kv() const {
  auto s = [](int v) { return std::to_string(v); };
  return {{"d", s(d)},
          {"n_enc_layers", s(n_enc_layers)},
          {"n_dit_layers", s(n_dit_layers)},
          {"n_heads", s(n_heads)},
          {"chunk_len", s(chunk_len)},
          {"action_dim", s(action_dim)},
          {"state_dim", s(state_dim)},
          {"n_views", s(n_views)},
          {"view_feature_dim", s(view_feature_dim)},
          {"tokens_per_view", s(tokens_per_view)},
          {"vocab_size", s(vocab_size)},
          {"max_lang_tokens", s(max_lang_tokens)},
          {"freeze_enc_layers", s(freeze_enc_layers)}};
}

PolicyConfig PolicyConfig::from_kv(const std::vector<std::pair<std::string, std::string>>& kv) {
  PolicyConfig cfg;
  for (const auto& [key, value] : kv) {
    int v = std::stoi(value);
    if (key == "d") cfg.d = v;
    else if (key == "n_enc_layers") cfg.n_enc_layers = v;
    else if (key == "n_dit_layers") cfg.n_dit_layers = v;
    else if (key == "n_heads") cfg.n_heads = v;
    else if (key == "chunk_len") cfg.chunk_len = v;
    else if (key == "action_dim") cfg.action_dim = v;
    else if (key == "state_dim") cfg.state_dim = v;
    else if (key == "n_views") cfg.n_views = v;
    else if (key == "view_feature_dim") cfg.view_feature_dim = v;
    else if (key == "tokens_per_view") cfg.tokens_per_view = v;
    else if (key == "vocab_size") cfg.vocab_size = v;
    else if (key == "max_lang_tokens") cfg.max_lang_tokens = v;
    else if (key == "freeze_enc_layers") cfg.freeze_enc_layers = v;
    else throw std::invalid_argument("PolicyConfig: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

void ParamSet::add(std::string name, Tensor t) {
  if (index_.count(name))
    throw std::invalid_argument("ParamSet: duplicate tensor name '" + name + "'");
  index_.emplace(name, items_.size());
  items_.emplace_back(std::move(name), std::move(t));
}

const Tensor& ParamSet::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end())
    throw std::invalid_argument("ParamSet: no tensor named '" + std::string(name) + "'");
  return items_[it->second].second;
}

bool ParamSet::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

std::int64_t ParamSet::total_elements() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.size();
  return n;
}

namespace {

Tensor trunc_normal(Shape shape, Rng& rng, double std_dev = 0.02) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    t.data()[i] = z * std_dev;
  }
  return t;
}

void add_attention_params(ParamSet& p, const std::string& prefix, int d, Rng& rng) {
  for (const char* nm : {"wq", "wk", "wv", "wo"}) p.add(prefix + ".attn." + nm, trunc_normal({d, d}, rng));
  for (const char* nm : {"bq", "bk", "bv", "bo"}) p.add(prefix + ".attn." + nm, Tensor::zeros({d}));
}

void add_mlp_params(ParamSet& p, const std::string& prefix, int d, Rng& rng) {
  p.add(prefix + ".mlp.w1", trunc_normal({d, 4 * d}, rng));
  p.add(prefix + ".mlp.b1", Tensor::zeros({4 * d}));
  p.add(prefix + ".mlp.w2", trunc_normal({4 * d, d}, rng));
  p.add(prefix + ".mlp.b2", Tensor::zeros({d}));
}

}  // namespace

ParamSet init_policy_params(const PolicyConfig& cfg, Rng& rng) {
  cfg.validate();
  const int d = cfg.d;
  ParamSet p;

  p.add("enc.tok_embed", trunc_normal({cfg.vocab_size, d}, rng));
  p.add("enc.lang_pos", trunc_normal({cfg.max_lang_tokens, d}, rng));
  p.add("enc.view_proj.w", trunc_normal({cfg.view_feature_dim, cfg.tokens_per_view * d}, rng));
  p.add("enc.view_proj.b", Tensor::zeros({cfg.tokens_per_view * d}));
  p.add("enc.view_pos", trunc_normal({cfg.n_view_tokens(), d}, rng));
  for (int i = 0; i < cfg.n_enc_layers; ++i) {
    std::string prefix = "enc.layer" + std::to_string(i);
    p.add(prefix + ".ln1.gain", Tensor::zeros({d}));
    p.add(prefix + ".ln1.shift", Tensor::zeros({d}));
    add_attention_params(p, prefix, d, rng);
    p.add(prefix + ".ln2.gain", Tensor::zeros({d}));
    p.add(prefix + ".ln2.shift", Tensor::zeros({d}));
    add_mlp_params(p, prefix, d, rng);
  }
  p.add("enc.ln_out.gain", Tensor::zeros({d}));
  p.add("enc.ln_out.shift", Tensor::zeros({d}));

  p.add("gen.state_proj.w", trunc_normal({cfg.state_dim, d}, rng));
  p.add("gen.state_proj.b", Tensor::zeros({d}));
  p.add("gen.action_proj.w", trunc_normal({cfg.action_dim, d}, rng));
  p.add("gen.action_proj.b", Tensor::zeros({d}));
  p.add("gen.tau_proj.w", trunc_normal({d, d}, rng));
  p.add("gen.tau_proj.b", Tensor::zeros({d}));
  p.add("gen.type_lang", trunc_normal({d}, rng));
  p.add("gen.type_vis", trunc_normal({d}, rng));
  p.add("gen.action_pos", trunc_normal({cfg.chunk_len, d}, rng));
  for (int i = 0; i < cfg.n_dit_layers; ++i) {
    std::string prefix = "gen.layer" + std::to_string(i);
    p.add(prefix + ".adaln.w", trunc_normal({d, 6 * d}, rng));
    p.add(prefix + ".adaln.b", Tensor::zeros({6 * d}));
    add_attention_params(p, prefix, d, rng);
    add_mlp_params(p, prefix, d, rng);
  }
  p.add("gen.final.adaln.w", trunc_normal({d, 2 * d}, rng));
  p.add("gen.final.adaln.b", Tensor::zeros({2 * d}));
  p.add("gen.head.w", trunc_normal({d, cfg.action_dim}, rng));
  p.add("gen.head.b", Tensor::zeros({cfg.action_dim}));
  return p;
}

ParamSet bind_params(Tape* tape, const ParamSet& params) {
  if (tape == nullptr) return params;
  ParamSet bound;
  for (const auto& [name, t] : params.items()) bound.add(name, tape->leaf(t, true));
  return bound;
}

Tensor timestep_encoding(double tau, int d) {
  Tensor enc = Tensor::zeros({1, d});
  const int half = d / 2;
  for (int i = 0; i < half; ++i) {
    const double freq =
        half > 1 ? std::pow(1000.0, static_cast<double>(i) / static_cast<double>(half - 1)) : 1.0;
    enc.data()[2 * i] = std::sin(tau * freq);
    enc.data()[2 * i + 1] = std::cos(tau * freq);
  }
  return enc;
}

PolicyNet::PolicyNet(PolicyConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

namespace {

Tensor mlp_block(const Tensor& x, const ParamSet& p, const std::string& prefix) {
  Tensor h = gelu(affine(x, p.at(prefix + ".mlp.w1"), p.at(prefix + ".mlp.b1")));
  return affine(h, p.at(prefix + ".mlp.w2"), p.at(prefix + ".mlp.b2"));
}

Tensor attn_block(const Tensor& x, const ParamSet& p, const std::string& prefix, int n_heads) {
  return self_attention(x, p.at(prefix + ".attn.wq"), p.at(prefix + ".attn.bq"),
                        p.at(prefix + ".attn.wk"), p.at(prefix + ".attn.bk"),
                        p.at(prefix + ".attn.wv"), p.at(prefix + ".attn.bv"),
                        p.at(prefix + ".attn.wo"), p.at(prefix + ".attn.bo"), n_heads);
}

Tensor as_vec(const Tensor& row) { return reshape(row, {row.dim(1)}); }

}  // namespace

SemanticFeatures PolicyNet::encode_semantics(std::span<const int> token_ids,
                                             const Observation& obs,
                                             const ParamSet& params) const {
  if (token_ids.empty())
    throw std::invalid_argument("encode_semantics: empty instruction token sequence");
  for (int id : token_ids)
    if (id < 0 || id >= cfg_.vocab_size)
      throw std::invalid_argument("encode_semantics: token id " + std::to_string(id) +
                                  " outside vocabulary of size " +
                                  std::to_string(cfg_.vocab_size));
  if (obs.view_features.rank() != 2 || obs.view_features.dim(0) != cfg_.n_views ||
      obs.view_features.dim(1) != cfg_.view_feature_dim)
    throw std::invalid_argument("encode_semantics: view_features must be " +
                                shape_str({cfg_.n_views, cfg_.view_feature_dim}) + ", got " +
                                shape_str(obs.view_features.shape()));

  const std::size_t n_keep =
      std::min(token_ids.size(), static_cast<std::size_t>(cfg_.max_lang_tokens));
  std::span<const int> ids = token_ids.subspan(0, n_keep);
  const int n_lang = static_cast<int>(ids.size());

  Tensor lang = add(gather_rows(params.at("enc.tok_embed"), ids),
                    slice_rows(params.at("enc.lang_pos"), 0, n_lang));
  Tensor vis = reshape(
      affine(obs.view_features, params.at("enc.view_proj.w"), params.at("enc.view_proj.b")),
      {cfg_.n_view_tokens(), cfg_.d});
  vis = add(vis, params.at("enc.view_pos"));

  std::vector<Tensor> parts{lang, vis};
  Tensor x = concat_rows(parts);
  for (int i = 0; i < cfg_.n_enc_layers; ++i) {
    const std::string prefix = "enc.layer" + std::to_string(i);
    Tensor normed = layer_norm_mod(x, params.at(prefix + ".ln1.gain"),
                                   params.at(prefix + ".ln1.shift"));
    x = add(x, attn_block(normed, params, prefix, cfg_.n_heads));
    normed = layer_norm_mod(x, params.at(prefix + ".ln2.gain"), params.at(prefix + ".ln2.shift"));
    x = add(x, mlp_block(normed, params, prefix));
  }
  x = layer_norm_mod(x, params.at("enc.ln_out.gain"), params.at("enc.ln_out.shift"));

  SemanticFeatures f;
  f.language_tokens = slice_rows(x, 0, n_lang);
  f.visual_tokens = slice_rows(x, n_lang, n_lang + cfg_.n_view_tokens());
  return f;
}

Tensor PolicyNet::embed_state_action(const Tensor& robot_state, const Tensor& a_tau, double tau,
                                     const ParamSet& params) const {
  if (!(tau >= 0.0 && tau <= 1.0))
    throw std::invalid_argument("embed_state_action: tau " + std::to_string(tau) +
                                " outside [0, 1]");
  if (robot_state.rank() != 1 || robot_state.dim(0) != cfg_.state_dim)
    throw std::invalid_argument("embed_state_action: robot_state must be (" +
                                std::to_string(cfg_.state_dim) + "), got " +
                                shape_str(robot_state.shape()));
  if (a_tau.rank() != 2 || a_tau.dim(0) != cfg_.chunk_len || a_tau.dim(1) != cfg_.action_dim)
    throw std::invalid_argument("embed_state_action: action chunk must be " +
                                shape_str({cfg_.chunk_len, cfg_.action_dim}) + ", got " +
                                shape_str(a_tau.shape()));

  Tensor state_tok = affine(reshape(robot_state, {1, cfg_.state_dim}),
                            params.at("gen.state_proj.w"), params.at("gen.state_proj.b"));

  Tensor tau_emb = affine(timestep_encoding(tau, cfg_.d), params.at("gen.tau_proj.w"),
                          params.at("gen.tau_proj.b"));
  Tensor act = affine(a_tau, params.at("gen.action_proj.w"), params.at("gen.action_proj.b"));
  act = add_rowvec(act, as_vec(tau_emb));
  act = add(act, params.at("gen.action_pos"));

  std::vector<Tensor> parts{state_tok, act};
  return concat_rows(parts);
}

Tensor PolicyNet::predict_velocity(const SemanticFeatures& features, const Tensor& a_tau,
                                   const Tensor& robot_state, double tau,
                                   const ParamSet& params) const {
  if (features.language_tokens.rank() != 2 || features.language_tokens.dim(1) != cfg_.d ||
      features.visual_tokens.rank() != 2 || features.visual_tokens.dim(1) != cfg_.d)
    throw std::invalid_argument("predict_velocity: semantic token grids must have width " +
                                std::to_string(cfg_.d));

  Tensor lang = add_rowvec(features.language_tokens, params.at("gen.type_lang"));
  Tensor vis = add_rowvec(features.visual_tokens, params.at("gen.type_vis"));
  Tensor state_action = embed_state_action(robot_state, a_tau, tau, params);

  std::vector<Tensor> parts{lang, vis, state_action};
  Tensor x = concat_rows(parts);
  const int n_tokens = x.dim(0);

  Tensor cond = affine(timestep_encoding(tau, cfg_.d), params.at("gen.tau_proj.w"),
                       params.at("gen.tau_proj.b"));
  for (int i = 0; i < cfg_.n_dit_layers; ++i) {
    const std::string prefix = "gen.layer" + std::to_string(i);
    Tensor mods = affine(cond, params.at(prefix + ".adaln.w"), params.at(prefix + ".adaln.b"));
    const int d = cfg_.d;
    Tensor gain1 = as_vec(slice_cols(mods, 0, d));
    Tensor shift1 = as_vec(slice_cols(mods, d, 2 * d));
    Tensor gate1 = as_vec(slice_cols(mods, 2 * d, 3 * d));
    Tensor gain2 = as_vec(slice_cols(mods, 3 * d, 4 * d));
    Tensor shift2 = as_vec(slice_cols(mods, 4 * d, 5 * d));
    Tensor gate2 = as_vec(slice_cols(mods, 5 * d, 6 * d));

    Tensor h = attn_block(layer_norm_mod(x, gain1, shift1), params, prefix, cfg_.n_heads);
    x = add(x, mul_rowvec(h, gate1));
    h = mlp_block(layer_norm_mod(x, gain2, shift2), params, prefix);
    x = add(x, mul_rowvec(h, gate2));
  }

  Tensor fmods = affine(cond, params.at("gen.final.adaln.w"), params.at("gen.final.adaln.b"));
  Tensor fgain = as_vec(slice_cols(fmods, 0, cfg_.d));
  Tensor fshift = as_vec(slice_cols(fmods, cfg_.d, 2 * cfg_.d));
  Tensor y = layer_norm_mod(x, fgain, fshift);

  Tensor action_out = slice_rows(y, n_tokens - cfg_.chunk_len, n_tokens);
  return affine(action_out, params.at("gen.head.w"), params.at("gen.head.b"));
}

}  // namespace actflow
