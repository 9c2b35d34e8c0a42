#include "gnr/toy_unet.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>

#include "binary_io.hpp"
#include "gnr/error.hpp"

namespace gnr {

namespace {

constexpr char kMagic[8] = {'G', 'N', 'R', 'T', 'O', 'Y', 'W', '\0'};
constexpr int kTimeFeatures = 32;

}  // namespace

const std::vector<std::string>& toy_vocabulary() {
  static const std::vector<std::string> words = {
      "a",      "an",    "the",      "photo",  "of",         "on",     "in",     "with",
      "red",    "green", "blue",     "yellow", "white",      "black",  "circle", "square",
      "triangle", "cross", "background", "cat", "dog",       "person", "man",    "woman",
      "happy",  "sad",   "smiling",  "sketch", "painting",   "style",  "big",    "small"};
  return words;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

ToyUNet::ToyUNet(ToyConfig config, std::uint64_t seed)
    : config_(config), codec_(Shape{config.channels, config.height, config.width}) {
  const ToyConfig& c = config_;
  if (c.height % 4 || c.width % 4) throw ConfigError("toy backbone needs spatial sizes divisible by 4");
  if (c.base_channels % c.groups || c.mid_channels % c.groups) {
    throw ConfigError("toy backbone channel counts must be divisible by the group count");
  }
  if (c.base_channels % c.heads || c.mid_channels % c.heads) {
    throw ConfigError("toy backbone channel counts must be divisible by the head count");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = stddev * normal(rng);
    return t;
  };
  auto conv = [&](const std::string& name, int c_in, int c_out, int k, double gain = 1.0) {
    add_param(name + ".w", randn({c_out, c_in, k, k}, gain / std::sqrt(static_cast<double>(c_in * k * k))));
    add_param(name + ".b", Tensor({c_out}, 0.0));
  };
  auto norm = [&](const std::string& name, int ch) {
    add_param(name + ".g", Tensor({ch}, 1.0));
    add_param(name + ".b", Tensor({ch}, 0.0));
  };
  auto lin = [&](const std::string& name, int n_in, int n_out) {
    add_param(name + ".w", randn({n_out, n_in}, 1.0 / std::sqrt(static_cast<double>(n_in))));
    add_param(name + ".b", Tensor({n_out}, 0.0));
  };
  auto res = [&](const std::string& name, int c_in, int c_out) {
    norm(name + ".n1", c_in);
    conv(name + ".c1", c_in, c_out, 3);
    lin(name + ".emb", c.embed_dim, c_out);
    norm(name + ".n2", c_out);
    conv(name + ".c2", c_out, c_out, 3, 0.5);
    if (c_in != c_out) conv(name + ".skip", c_in, c_out, 1);
  };
  auto attn = [&](const std::string& name, int ch) {
    norm(name + ".n", ch);
    conv(name + ".q", ch, ch, 1);
    conv(name + ".k", ch, ch, 1);
    conv(name + ".v", ch, ch, 1);
    conv(name + ".proj", ch, ch, 1, 0.5);
  };

  const int c1 = c.base_channels, c2 = c.mid_channels;
  lin("time1", kTimeFeatures, c.embed_dim);
  lin("time2", c.embed_dim, c.embed_dim);
  add_param("word_emb", randn({static_cast<int>(toy_vocabulary().size()), c.embed_dim}, 0.5));
  add_param("null_emb", randn({1, c.embed_dim}, 0.5));
  conv("in", c.channels, c1, 3);
  res("enc1", c1, c1);
  attn("enc1_attn", c1);
  res("enc2", c1, c2);
  attn("enc2_attn", c2);
  res("mid", c2, c2);
  res("dec1", c2, c2);
  res("dec2_r1", 2 * c2, c2);
  res("dec2_r2", c2, c2);
  attn("dec2_attn", c2);
  res("dec3", c2 + c1, c1);
  attn("dec3_attn", c1);
  norm("out_norm", c1);
  conv("out", c1, c.channels, 3, 0.5);
}

void ToyUNet::add_param(const std::string& name, Tensor value) {
  index_.emplace(name, params_.size());
  names_.push_back(name);
  params_.push_back(std::move(value));
}

std::size_t ToyUNet::index_of(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConsistencyError("toy backbone has no parameter '" + name + "'");
  return it->second;
}

std::size_t ToyUNet::scalar_count() const {
  std::size_t n = 0;
  for (const Tensor& p : params_) n += p.size();
  return n;
}

Conditioning ToyUNet::embed_prompt(std::string_view text) const {
  Conditioning c;
  c.source_text = std::string(text);
  const auto& vocab = toy_vocabulary();
  for (const std::string& w : tokenize(text)) {
    const auto it = std::find(vocab.begin(), vocab.end(), w);
    if (it == vocab.end()) throw VocabularyError("word '" + w + "' is not in the toy vocabulary");
    c.tokens.push_back(static_cast<int>(it - vocab.begin()));
  }
  const int d = config_.embed_dim;
  if (c.tokens.empty()) {
    c.is_null = true;
    c.embedding = params_[index_of("null_emb")];
    return c;
  }
  const Tensor& table = params_[index_of("word_emb")];
  c.embedding = Tensor({static_cast<int>(c.tokens.size()), d});
  for (std::size_t i = 0; i < c.tokens.size(); ++i) {
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(c.tokens[i]) * d, d,
                c.embedding.data().begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  return c;
}

RecordNodes ToyUNet::forward(ad::Tape& tape, ad::Var z, const Timestep& t, const Conditioning& c,
                             bool record_internals) const {
  return build(tape, z, t, c, record_internals, nullptr);
}

RecordNodes ToyUNet::forward_trainable(ad::Tape& tape, ad::Var z, const Timestep& t, const Conditioning& c,
                                       std::vector<ad::Var>& weights) const {
  return build(tape, z, t, c, false, &weights);
}

RecordNodes ToyUNet::build(ad::Tape& tape, ad::Var z, const Timestep& t, const Conditioning& c, bool record,
                           std::vector<ad::Var>* trainable) const {
  using namespace ad;
  std::vector<Var> leaves(params_.size());
  auto P = [&](const std::string& name) -> Var {
    const std::size_t i = index_of(name);
    if (!leaves[i].valid()) leaves[i] = trainable ? tape.parameter(params_[i]) : tape.constant_ref(params_[i]);
    return leaves[i];
  };
  const int groups = config_.groups;
  const int heads = config_.heads;

  auto res = [&](const std::string& n, Var x, Var emb) {
    Var h = conv2d(silu(group_norm(x, groups, P(n + ".n1.g"), P(n + ".n1.b"))), P(n + ".c1.w"), P(n + ".c1.b"));
    h = add_channel(h, linear(emb, P(n + ".emb.w"), P(n + ".emb.b")));
    h = conv2d(silu(group_norm(h, groups, P(n + ".n2.g"), P(n + ".n2.b"))), P(n + ".c2.w"), P(n + ".c2.b"));
    const Var skip = index_.contains(n + ".skip.w") ? conv2d(x, P(n + ".skip.w"), P(n + ".skip.b")) : x;
    return skip + h;
  };
  std::vector<Var> maps;
  auto attn = [&](const std::string& n, Var x) {
    const int ch = x.value().dim(0), hh = x.value().dim(1), ww = x.value().dim(2), tokens = hh * ww;
    const int d = ch / heads;
    const Var xn = group_norm(x, groups, P(n + ".n.g"), P(n + ".n.b"));
    const Var q = reshape(conv2d(xn, P(n + ".q.w"), P(n + ".q.b")), {ch, tokens});
    const Var k = reshape(conv2d(xn, P(n + ".k.w"), P(n + ".k.b")), {ch, tokens});
    const Var v = reshape(conv2d(xn, P(n + ".v.w"), P(n + ".v.b")), {ch, tokens});
    std::vector<Var> outs, probs;
    for (int hd = 0; hd < heads; ++hd) {
      const Var qh = slice_rows(q, hd * d, (hd + 1) * d);
      const Var kh = slice_rows(k, hd * d, (hd + 1) * d);
      const Var vh = slice_rows(v, hd * d, (hd + 1) * d);
      const Var a = softmax_rows(scale(matmul(transpose(qh), kh), 1.0 / std::sqrt(static_cast<double>(d))));
      probs.push_back(a);
      outs.push_back(matmul(vh, transpose(a)));
    }
    if (record) maps.push_back(reshape(concat_rows(probs), {heads, tokens, tokens}));
    const Var o = reshape(concat_rows(outs), {ch, hh, ww});
    return x + conv2d(o, P(n + ".proj.w"), P(n + ".proj.b"));
  };

  // Noise-level features depend only on alpha_bar, so any schedule profile
  // (and any T) conditions the network consistently.
  Tensor tf({kTimeFeatures});
  const double level = 1000.0 * std::sqrt(std::max(0.0, 1.0 - t.alpha_bar));
  const int half = kTimeFeatures / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    tf[static_cast<std::size_t>(i)] = std::sin(level * freq);
    tf[static_cast<std::size_t>(i + half)] = std::cos(level * freq);
  }
  Var temb = linear(silu(linear(tape.constant(std::move(tf)), P("time1.w"), P("time1.b"))), P("time2.w"), P("time2.b"));
  Var text = c.is_null || c.tokens.empty() ? reshape(P("null_emb"), {config_.embed_dim})
                                           : mean_rows(P("word_emb"), c.tokens);
  const Var emb = silu(temb + text);

  RecordNodes rec;
  Var h = conv2d(z, P("in.w"), P("in.b"));
  h = attn("enc1_attn", res("enc1", h, emb));
  const Var skip1 = h;
  h = attn("enc2_attn", res("enc2", avg_pool2(h), emb));
  const Var skip2 = h;
  h = res("mid", avg_pool2(h), emb);
  h = res("dec1", h, emb);
  h = res("dec2_r1", concat_channels(upsample_nearest2(h), skip2), emb);
  h = res("dec2_r2", h, emb);
  if (record) rec.features.emplace(kTapUp2Resnet2, h);
  h = attn("dec2_attn", h);
  h = res("dec3", concat_channels(upsample_nearest2(h), skip1), emb);
  h = attn("dec3_attn", h);
  if (record) rec.features.emplace(kTapLastUpBlock, h);
  rec.eps = conv2d(silu(group_norm(h, groups, P("out_norm.g"), P("out_norm.b"))), P("out.w"), P("out.b"));
  rec.self_attn = std::move(maps);

  if (trainable) {
    trainable->clear();
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      trainable->push_back(leaves[i].valid() ? leaves[i] : tape.parameter(params_[i]));
    }
  }
  return rec;
}

std::vector<std::uint8_t> ToyUNet::serialize() const {
  detail::ByteWriter w;
  for (char ch : kMagic) w.put<char>(ch);
  w.put<std::uint32_t>(kFormatVersion);
  const ToyConfig& c = config_;
  for (int v : {c.channels, c.height, c.width, c.base_channels, c.mid_channels, c.embed_dim, c.heads, c.groups}) {
    w.put<std::int32_t>(v);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params_.size()));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    w.put_string(names_[i]);
    w.put_tensor(params_[i]);
  }
  return w.take();
}

ToyUNet ToyUNet::deserialize(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic(kMagic, "toy weights");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) {
    throw ConsistencyError("toy weights format version " + std::to_string(version) + " is not supported (expected " +
                           std::to_string(kFormatVersion) + ")");
  }
  ToyConfig c;
  for (int* field : {&c.channels, &c.height, &c.width, &c.base_channels, &c.mid_channels, &c.embed_dim, &c.heads,
                     &c.groups}) {
    *field = r.get<std::int32_t>();
  }
  ToyUNet net(c, 0);
  const auto n = r.get<std::uint32_t>();
  if (n != net.params_.size()) throw ConsistencyError("toy weights: parameter count mismatch");
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.get_string();
    Tensor value = r.get_tensor();
    Tensor& slot = net.params_[net.index_of(name)];
    if (slot.shape() != value.shape()) {
      throw ConsistencyError("toy weights: parameter '" + name + "' has shape " + shape_str(value.shape()));
    }
    slot = std::move(value);
  }
  if (!r.at_end()) throw ConsistencyError("toy weights: trailing bytes");
  return net;
}

ToyUNet ToyUNet::load(const std::filesystem::path& path) { return deserialize(detail::read_file(path)); }

void ToyUNet::save(const std::filesystem::path& path) const { detail::write_file(path, serialize()); }

}  // namespace gnr
