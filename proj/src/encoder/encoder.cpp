#include "ragcap/encoder.hpp"

#include <stdexcept>

#include "ragcap/ag/archive.hpp"

namespace ragcap::encoder {

template <typename T>
BasicImageEncoder<T>::BasicImageEncoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  if (config.image_size % config.patch != 0) {
    throw std::invalid_argument("encoder: image size must be a multiple of the patch size");
  }
  if (config.d_model % config.heads != 0) {
    throw std::invalid_argument("encoder: d_model must be divisible by heads");
  }
  ag::Initializer init(seed);
  const int patch_dim = config.channels * config.patch * config.patch;
  const int hidden = config.d_model * config.mlp_ratio;
  patch_embed_ = ag::Linear<T>(patch_dim, config.d_model, init);
  pos_ = init.normal<T>({config.num_patches(), config.d_model}, 0.1);
  for (int i = 0; i < config.blocks; ++i) {
    blocks_.emplace_back(config.d_model, config.heads, hidden, init);
  }
  ln_out_ = ag::LayerNorm<T>(config.d_model, init);
  queries_ = ag::QueryBlock<T>(config.n_queries, config.d_model, config.heads, hidden, init, true);
  project_ = ag::Linear<T>(config.d_model, config.d_emb, init, false);
}

template <typename T>
BasicEncoderOutput<T> BasicImageEncoder<T>::encode(const Tensor& images) const {
  const auto& c = config_;
  if (images.rank() != 4 || images.dim(1) != c.channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size) {
    throw std::invalid_argument("encode: expected images [B," + std::to_string(c.channels) + "," +
                                std::to_string(c.image_size) + "," + std::to_string(c.image_size) +
                                "], got " + ag::shape_str(images.shape()));
  }
  const int batch = images.dim(0);
  const int np = c.num_patches();

  auto x = ag::add_rows_cyclic(patch_embed_(ag::patchify(images, c.patch)), pos_);
  ag::AttentionSpec spec;
  spec.batch = batch;
  spec.query_len = np;
  spec.key_len = np;
  for (const auto& block : blocks_) x = block(x, spec);
  x = ln_out_(x);

  BasicEncoderOutput<T> out;
  out.batch = batch;
  out.patch_features = x;
  out.query_tokens = queries_(x, batch, np);
  out.z = ag::l2_normalize_rows(project_(ag::mean_row_groups(out.query_tokens, c.n_queries)));
  return out;
}

template <typename T>
ag::ParamList<T> BasicImageEncoder<T>::params() const {
  ag::ParamList<T> out;
  patch_embed_.collect(out, "encoder.patch_embed");
  out.push_back({"encoder.pos", pos_});
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, "encoder.block" + std::to_string(i));
  ln_out_.collect(out, "encoder.ln_out");
  queries_.collect(out, "encoder.query");
  project_.collect(out, "encoder.project");
  return out;
}

template <typename T>
BasicImageEncoder<T> BasicImageEncoder<T>::clone() const {
  BasicImageEncoder copy(config_, 0);
  const auto src = params();
  const auto dst = copy.params();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto d = dst[i].var;
    std::copy(src[i].var.value().begin(), src[i].var.value().end(), d.value().begin());
    d.set_requires_grad(src[i].var.requires_grad());
  }
  return copy;
}

template <typename T>
std::string BasicImageEncoder<T>::hash() const {
  if constexpr (std::is_same_v<T, float>) {
    return ag::params_hash(params());
  } else {
    ag::ParamList<float> narrow;
    for (const auto& p : params()) {
      std::vector<float> v(p.var.value().begin(), p.var.value().end());
      narrow.push_back({p.name, ag::Var<float>::from(p.var.shape(), std::move(v))});
    }
    return ag::params_hash(narrow);
  }
}

template class BasicImageEncoder<float>;
template class BasicImageEncoder<double>;

EncoderSnapshot::EncoderSnapshot(const ImageEncoder& source) : encoder_(source.clone()) {
  ag::set_requires_grad(encoder_.params(), false);
  hash_ = encoder_.hash();
}

bool EncoderSnapshot::intact() const { return encoder_.hash() == hash_; }

std::vector<float> embed_images(const ImageEncoder& encoder, const std::vector<float>& images,
                                int count, int chunk) {
  const auto& c = encoder.config();
  const std::size_t per = static_cast<std::size_t>(c.channels) * c.image_size * c.image_size;
  if (images.size() != per * static_cast<std::size_t>(count)) {
    throw std::invalid_argument("embed_images: image buffer size does not match count");
  }
  ag::NoGradGuard no_grad;
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(count) * c.d_emb);
  for (int start = 0; start < count; start += chunk) {
    const int n = std::min(chunk, count - start);
    std::vector<float> buf(images.begin() + static_cast<std::ptrdiff_t>(per * start),
                           images.begin() + static_cast<std::ptrdiff_t>(per * (start + n)));
    auto x = Tensor::from({n, c.channels, c.image_size, c.image_size}, std::move(buf));
    const auto enc = encoder.encode(x);
    out.insert(out.end(), enc.z.value().begin(), enc.z.value().end());
  }
  return out;
}

}  // namespace ragcap::encoder
