#include "veil/extractor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "network.hpp"
#include "veil/errors.hpp"

namespace veil {

using detail::Matrix;

double feature_distance(const FeatureVector& u, const FeatureVector& v) {
  if (u.dim() != v.dim()) {
    throw DimensionError("feature vectors differ in dimension (" + std::to_string(u.dim()) +
                         " vs " + std::to_string(v.dim()) + ")");
  }
  return (u.values - v.values).norm();
}

ArchConfig ArchConfig::flatten_pixels(int height, int width, int channels) {
  ArchConfig a;
  a.height = height;
  a.width = width;
  a.channels = channels;
  a.conv_widths.clear();
  a.embed_dim = height * width * channels;
  a.flatten = true;
  return a;
}

int ArchConfig::embedding_dim() const { return flatten ? height * width * channels : embed_dim; }

std::size_t ArchConfig::param_count() const {
  if (flatten) return 0;
  std::size_t n = 0;
  int cin = channels;
  for (int cout : conv_widths) {
    n += static_cast<std::size_t>(cout) * 9 * cin + cout;
    cin = cout;
  }
  n += static_cast<std::size_t>(embed_dim) * cin + embed_dim;
  return n;
}

void ArchConfig::validate() const {
  if (height <= 0 || width <= 0 || (channels != 1 && channels != 3)) {
    throw ParamError("architecture input shape is invalid");
  }
  if (flatten) return;
  if (conv_widths.empty()) throw ParamError("architecture needs at least one conv block");
  const int scale = 1 << conv_widths.size();
  if (height % scale != 0 || width % scale != 0) {
    throw ParamError("input size must be divisible by 2^blocks = " + std::to_string(scale));
  }
  for (int c : conv_widths) {
    if (c <= 0) throw ParamError("conv widths must be positive");
  }
  if (embed_dim <= 0) throw ParamError("embedding dimension must be positive");
}

void PgdConfig::validate() const {
  if (steps < 1) throw ParamError("PGD steps must be >= 1");
  if (!(step_size > 0.0)) throw ParamError("PGD step size must be positive");
  if (!(epsilon >= 0.0)) throw ParamError("PGD epsilon must be non-negative");
}

int LinearHead::row_of(int label) const {
  const auto it = std::find(labels.begin(), labels.end(), label);
  return it == labels.end() ? -1 : static_cast<int>(it - labels.begin());
}

Eigen::VectorXd LinearHead::logits(const FeatureVector& z) const {
  return weights * z.values + bias;
}

FeatureExtractor FeatureExtractor::initialize(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  FeatureExtractor phi;
  phi.arch_ = arch;
  phi.params_.assign(arch.param_count(), 0.0);
  phi.provenance_.seed = seed;
  if (arch.flatten) return phi;

  SeededRng rng(seed);
  std::size_t offset = 0;
  int cin = arch.channels;
  for (int cout : arch.conv_widths) {
    const double scale = std::sqrt(2.0 / (9.0 * cin));
    const std::size_t n = static_cast<std::size_t>(cout) * 9 * cin;
    for (std::size_t i = 0; i < n; ++i) phi.params_[offset + i] = scale * rng.normal();
    offset += n + cout;  // biases start at zero
    cin = cout;
  }
  const double scale = std::sqrt(1.0 / cin);
  const std::size_t n = static_cast<std::size_t>(arch.embed_dim) * cin;
  for (std::size_t i = 0; i < n; ++i) phi.params_[offset + i] = scale * rng.normal();
  detail::round_to_float(phi.params_);
  return phi;
}

std::uint64_t FeatureExtractor::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double w : params_) {
    const float f = static_cast<float>(w);
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    for (int k = 0; k < 4; ++k) {
      h ^= (bits >> (8 * k)) & 0xffu;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

const LinearHead& FeatureExtractor::head() const {
  if (!head_) throw ModelError("extractor has no classification head");
  return *head_;
}

LinearHead& FeatureExtractor::head() {
  if (!head_) throw ModelError("extractor has no classification head");
  return *head_;
}

void FeatureExtractor::check_input(const Image& x) const {
  if (x.height() != arch_.height || x.width() != arch_.width || x.channels() != arch_.channels) {
    throw DimensionError("image " + std::to_string(x.height()) + "x" + std::to_string(x.width()) +
                         "x" + std::to_string(x.channels()) + " does not match extractor input " +
                         std::to_string(arch_.height) + "x" + std::to_string(arch_.width) + "x" +
                         std::to_string(arch_.channels));
  }
}

namespace {

constexpr std::size_t kChunk = 64;

}  // namespace

std::vector<FeatureVector> FeatureExtractor::embed_batch(std::span<const Image* const> xs) const {
  std::vector<FeatureVector> out;
  out.reserve(xs.size());
  const detail::Network net(arch_, params_.data());
  for (std::size_t start = 0; start < xs.size(); start += kChunk) {
    const auto chunk = xs.subspan(start, std::min(kChunk, xs.size() - start));
    for (const Image* x : chunk) check_input(*x);
    const Matrix emb = net.forward(detail::pack(chunk), static_cast<int>(chunk.size()), nullptr);
    for (Eigen::Index b = 0; b < emb.cols(); ++b) out.emplace_back(emb.col(b));
  }
  return out;
}

std::vector<FeatureVector> FeatureExtractor::embed_batch(std::span<const Image> xs) const {
  std::vector<const Image*> ptrs;
  ptrs.reserve(xs.size());
  for (const auto& x : xs) ptrs.push_back(&x);
  return embed_batch(std::span<const Image* const>(ptrs));
}

FeatureVector FeatureExtractor::embed(const Image& x) const {
  const Image* ptr = &x;
  return std::move(embed_batch(std::span<const Image* const>(&ptr, 1)).front());
}

std::vector<PixelGradient> FeatureExtractor::embed_with_grad_batch(
    std::span<const Image* const> xs, std::span<const EmbeddingLoss> losses) const {
  if (xs.size() != losses.size()) throw ParamError("one loss per image required");
  std::vector<PixelGradient> out(xs.size());
  if (xs.empty()) return out;
  for (const Image* x : xs) check_input(*x);

  const detail::Network net(arch_, params_.data());
  detail::ForwardCache cache;
  const int batch = static_cast<int>(xs.size());
  const Matrix emb = net.forward(detail::pack(xs), batch, &cache);

  Matrix d_embed(emb.rows(), batch);
  Eigen::VectorXd g(emb.rows());
  for (int b = 0; b < batch; ++b) {
    g.setZero();
    const double value = losses[b](emb.col(b), g);
    if (!std::isfinite(value) || !g.allFinite()) {
      throw NumericalError("embedding loss is not finite");
    }
    out[b].value = value;
    d_embed.col(b) = g;
  }
  const Matrix d_input = net.backward(cache, d_embed, nullptr, true);
  const std::size_t per = xs.front()->size();
  for (int b = 0; b < batch; ++b) {
    out[b].grad = detail::unpack_one(d_input, b, per, arch_.channels);
  }
  return out;
}

PixelGradient FeatureExtractor::embed_with_grad(const Image& x, const EmbeddingLoss& loss) const {
  const Image* ptr = &x;
  return std::move(embed_with_grad_batch(std::span<const Image* const>(&ptr, 1),
                                         std::span<const EmbeddingLoss>(&loss, 1))
                       .front());
}

Eigen::VectorXd FeatureExtractor::logits(const Image& x) const {
  return head().logits(embed(x));
}

std::pair<int, double> FeatureExtractor::predict(const Image& x) const {
  const Eigen::VectorXd z = logits(x);
  Eigen::Index best;
  const double m = z.maxCoeff(&best);
  const double conf = 1.0 / (z.array() - m).exp().sum();
  return {head_->labels[best], conf};
}

// ---------------------------------------------------------------------------
// Training

class ExtractorTrainer {
 public:
  ExtractorTrainer(FeatureExtractor& phi, const Samples& samples, const TrainOptions& options)
      : phi_(phi), samples_(samples), options_(options) {
    const LinearHead& head = phi_.head();
    rows_.reserve(samples.size());
    for (int label : samples.labels) {
      const int r = head.row_of(label);
      if (r < 0) throw ModelError("label " + std::to_string(label) + " missing from head");
      rows_.push_back(r);
    }
  }

  void run(int epochs, const PgdConfig* pgd) {
    LinearHead& head = phi_.head();
    detail::Adam backbone_opt(phi_.params_.size(), options_.learning_rate);
    detail::Adam head_opt(head.weights.size() + head.bias.size(), options_.learning_rate);
    std::vector<double> grad(phi_.params_.size());
    std::vector<double> head_params(head.weights.size() + head.bias.size());
    std::vector<double> head_grad(head_params.size());
    SeededRng rng(options_.seed);

    const std::size_t n = samples_.size();
    const auto batch_size = static_cast<std::size_t>(std::max(1, options_.batch_size));
    for (int epoch = 0; epoch < epochs; ++epoch) {
      const auto order = rng.permutation(n);
      for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        std::vector<const Image*> batch;
        std::vector<int> rows;
        for (std::size_t i = start; i < end; ++i) {
          batch.push_back(samples_.images[order[i]]);
          rows.push_back(rows_[order[i]]);
        }
        Matrix x = detail::pack(batch);
        int count = static_cast<int>(batch.size());
        if (pgd) {
          const Matrix adv = pgd_batch(phi_, x, rows, *pgd, rng);
          Matrix mixed(x.rows(), x.cols() * 2);
          mixed << x, adv;
          x = std::move(mixed);
          const std::vector<int> copy = rows;
          rows.insert(rows.end(), copy.begin(), copy.end());
          count *= 2;
        }

        const detail::Network net(phi_.arch_, phi_.params_.data());
        detail::ForwardCache cache;
        const Matrix emb = net.forward(x, count, &cache);
        const Matrix logits = detail::head_logits(head, emb);
        Matrix d_logits;
        detail::softmax_xent(logits, rows, d_logits);

        const Matrix d_w = d_logits * emb.transpose();
        const Eigen::VectorXd d_b = d_logits.rowwise().sum();
        const Matrix d_embed = head.weights.transpose() * d_logits;

        std::fill(grad.begin(), grad.end(), 0.0);
        net.backward(cache, d_embed, grad.data(), false);
        backbone_opt.step(phi_.params_, grad);
        detail::round_to_float(phi_.params_);

        std::memcpy(head_params.data(), head.weights.data(), sizeof(double) * head.weights.size());
        std::memcpy(head_params.data() + head.weights.size(), head.bias.data(),
                    sizeof(double) * head.bias.size());
        std::memcpy(head_grad.data(), d_w.data(), sizeof(double) * d_w.size());
        std::memcpy(head_grad.data() + d_w.size(), d_b.data(), sizeof(double) * d_b.size());
        head_opt.step(head_params, head_grad);
        detail::round_to_float(head_params);
        std::memcpy(head.weights.data(), head_params.data(), sizeof(double) * head.weights.size());
        std::memcpy(head.bias.data(), head_params.data() + head.weights.size(),
                    sizeof(double) * head.bias.size());
      }
    }
  }

  static Matrix pgd_batch(const FeatureExtractor& phi, const Matrix& x, std::span<const int> rows,
                          const PgdConfig& cfg, SeededRng& rng) {
    const LinearHead& head = phi.head();
    const int batch = static_cast<int>(rows.size());
    Matrix adv = x;
    for (Eigen::Index i = 0; i < adv.size(); ++i) {
      const double v = x.data()[i] + rng.uniform(-cfg.epsilon, cfg.epsilon);
      adv.data()[i] = std::clamp(v, std::max(0.0, x.data()[i] - cfg.epsilon),
                                 std::min(1.0, x.data()[i] + cfg.epsilon));
    }
    const detail::Network net(phi.arch_, phi.params_.data());
    for (int step = 0; step < cfg.steps; ++step) {
      detail::ForwardCache cache;
      const Matrix emb = net.forward(adv, batch, &cache);
      Matrix d_logits;
      detail::softmax_xent(detail::head_logits(head, emb), rows, d_logits);
      const Matrix d_input = net.backward(cache, head.weights.transpose() * d_logits, nullptr, true);
      for (Eigen::Index i = 0; i < adv.size(); ++i) {
        const double g = d_input.data()[i];
        const double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
        const double v = adv.data()[i] + cfg.step_size * s;
        adv.data()[i] = std::clamp(v, std::max(0.0, x.data()[i] - cfg.epsilon),
                                   std::min(1.0, x.data()[i] + cfg.epsilon));
      }
    }
    return adv;
  }

 private:
  FeatureExtractor& phi_;
  const Samples& samples_;
  TrainOptions options_;
  std::vector<int> rows_;
};

namespace {

void require_trainable(const LabeledDataset& data) {
  if (data.class_count() < 2) {
    throw DatasetError("training needs at least 2 classes, got " +
                       std::to_string(data.class_count()));
  }
  for (const auto& [label, c] : data.classes) {
    if (c.train.size() < 5) {
      throw DatasetError("class " + std::to_string(label) + " has fewer than 5 train images");
    }
  }
}

LinearHead init_head(const std::vector<int>& labels, int dim, SeededRng& rng) {
  LinearHead head;
  head.labels = labels;
  head.weights.resize(static_cast<Eigen::Index>(labels.size()), dim);
  const double scale = std::sqrt(1.0 / dim);
  for (Eigen::Index i = 0; i < head.weights.size(); ++i) {
    head.weights.data()[i] = static_cast<float>(scale * rng.normal());
  }
  head.bias.setZero(static_cast<Eigen::Index>(labels.size()));
  return head;
}

}  // namespace

double classification_accuracy(const FeatureExtractor& phi, const Samples& samples) {
  if (samples.size() == 0) return 0.0;
  const LinearHead& head = phi.head();
  const auto embeddings = phi.embed_batch(std::span<const Image* const>(samples.images));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Eigen::Index best;
    head.logits(embeddings[i]).maxCoeff(&best);
    if (head.labels[best] == samples.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

FeatureExtractor train_extractor(const LabeledDataset& data, const ArchConfig& arch,
                                 const TrainOptions& options) {
  require_trainable(data);
  if (arch.flatten) throw ParamError("flatten extractors have no trainable weights");
  FeatureExtractor phi = FeatureExtractor::initialize(arch, options.seed);
  SeededRng head_rng(mix_seed(options.seed, 0x4ead));
  phi.set_head(init_head(data.labels(), arch.embed_dim, head_rng));

  const Samples samples = train_samples(data);
  TrainOptions opts = options;
  opts.seed = mix_seed(options.seed, 0x7a1);
  ExtractorTrainer(phi, samples, opts).run(options.epochs, nullptr);

  Provenance& p = phi.provenance();
  p.dataset_id = data.id;
  p.mode = "extractor";
  p.epochs = options.epochs;
  p.seed = options.seed;
  p.train_accuracy = classification_accuracy(phi, samples);
  return phi;
}

Image pgd_perturb(const FeatureExtractor& phi, const Image& x, int label, const PgdConfig& cfg,
                  SeededRng& rng) {
  cfg.validate();
  phi.check_input(x);
  if (!phi.has_head()) throw ModelError("PGD needs a classification head");
  const int row = phi.head().row_of(label);
  if (row < 0) throw ModelError("label " + std::to_string(label) + " missing from head");
  const Image* ptr = &x;
  const Matrix adv = ExtractorTrainer::pgd_batch(phi, detail::pack(std::span<const Image* const>(&ptr, 1)),
                                                 std::span<const int>(&row, 1), cfg, rng);
  return Image(x.height(), x.width(), x.channels(), detail::unpack_one(adv, 0, x.size(), x.channels()));
}

double pgd_success_rate(const FeatureExtractor& phi, const Samples& samples, const PgdConfig& cfg,
                        std::uint64_t seed) {
  SeededRng rng(seed);
  std::size_t attacked = 0, flipped = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (phi.predict(*samples.images[i]).first != samples.labels[i]) continue;
    ++attacked;
    const Image adv = pgd_perturb(phi, *samples.images[i], samples.labels[i], cfg, rng);
    if (phi.predict(adv).first != samples.labels[i]) ++flipped;
  }
  return attacked == 0 ? 0.0 : static_cast<double>(flipped) / static_cast<double>(attacked);
}

FeatureExtractor robust_train(const FeatureExtractor& phi, const LabeledDataset& data,
                              int extra_epochs, const PgdConfig& cfg, std::uint64_t seed,
                              const TrainOptions& options) {
  cfg.validate();
  if (extra_epochs < 1) throw ParamError("robust training needs at least one epoch");
  if (phi.provenance().mode == "untrained" || !phi.has_head()) {
    throw ModelError("robust training needs a trained extractor with a head");
  }
  require_trainable(data);
  FeatureExtractor out = phi;
  const Samples samples = train_samples(data);
  TrainOptions opts = options;
  opts.seed = mix_seed(seed, 0x0b);
  ExtractorTrainer(out, samples, opts).run(extra_epochs, &cfg);

  Provenance& p = out.provenance();
  p.robust = true;
  p.robust_epochs = extra_epochs;
  p.pgd = cfg;
  p.train_accuracy = classification_accuracy(out, samples);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "VEILCKPT" | u32 version | u32 header length | JSON header |
// u64 n | n x f32 backbone | u64 m | m x f32 head weights (col-major) then bias.

namespace {

constexpr std::array<char, 8> kMagic{'V', 'E', 'I', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) os.put(static_cast<char>((v >> (8 * k)) & 0xff));
}
void put_u64(std::ostream& os, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) os.put(static_cast<char>((v >> (8 * k)) & 0xff));
}
void put_f32(std::ostream& os, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32(os, bits);
}

std::uint64_t get_uint(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int k = 0; k < bytes; ++k) {
    const int c = is.get();
    if (c == EOF) throw IoError("truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * k);
  }
  return v;
}
double get_f32(std::istream& is) {
  const auto bits = static_cast<std::uint32_t>(get_uint(is, 4));
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return static_cast<double>(f);
}

nlohmann::json arch_to_json(const ArchConfig& a) {
  return {{"height", a.height},          {"width", a.width},
          {"channels", a.channels},      {"conv_widths", a.conv_widths},
          {"embed_dim", a.embed_dim},    {"flatten", a.flatten}};
}

ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig a;
  a.height = j.at("height");
  a.width = j.at("width");
  a.channels = j.at("channels");
  a.conv_widths = j.at("conv_widths").get<std::vector<int>>();
  a.embed_dim = j.at("embed_dim");
  a.flatten = j.at("flatten");
  return a;
}

}  // namespace

void FeatureExtractor::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());

  nlohmann::json header;
  header["arch"] = arch_to_json(arch_);
  nlohmann::json prov{{"dataset_id", provenance_.dataset_id},
                      {"mode", provenance_.mode},
                      {"epochs", provenance_.epochs},
                      {"seed", provenance_.seed},
                      {"robust", provenance_.robust},
                      {"robust_epochs", provenance_.robust_epochs},
                      {"train_accuracy", provenance_.train_accuracy}};
  if (provenance_.pgd) {
    prov["pgd"] = {{"steps", provenance_.pgd->steps},
                   {"step_size", provenance_.pgd->step_size},
                   {"epsilon", provenance_.pgd->epsilon}};
  }
  header["provenance"] = prov;
  if (head_) header["head_labels"] = head_->labels;
  const std::string text = header.dump();

  os.write(kMagic.data(), kMagic.size());
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  put_u64(os, params_.size());
  for (double w : params_) put_f32(os, w);
  if (head_) {
    put_u64(os, static_cast<std::uint64_t>(head_->weights.size() + head_->bias.size()));
    for (Eigen::Index i = 0; i < head_->weights.size(); ++i) put_f32(os, head_->weights.data()[i]);
    for (Eigen::Index i = 0; i < head_->bias.size(); ++i) put_f32(os, head_->bias[i]);
  } else {
    put_u64(os, 0);
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

FeatureExtractor FeatureExtractor::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw IoError("not a checkpoint file: " + path.string());
  const auto version = static_cast<std::uint32_t>(get_uint(is, 4));
  if (version != kVersion) {
    throw IoError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                  std::to_string(kVersion) + ")");
  }
  const auto header_len = static_cast<std::uint32_t>(get_uint(is, 4));
  std::string text(header_len, '\0');
  is.read(text.data(), header_len);
  if (!is) throw IoError("truncated checkpoint header");

  FeatureExtractor phi;
  try {
    const auto header = nlohmann::json::parse(text);
    phi.arch_ = arch_from_json(header.at("arch"));
    const auto& prov = header.at("provenance");
    phi.provenance_.dataset_id = prov.at("dataset_id");
    phi.provenance_.mode = prov.at("mode");
    phi.provenance_.epochs = prov.at("epochs");
    phi.provenance_.seed = prov.at("seed");
    phi.provenance_.robust = prov.at("robust");
    phi.provenance_.robust_epochs = prov.at("robust_epochs");
    phi.provenance_.train_accuracy = prov.at("train_accuracy");
    if (prov.contains("pgd")) {
      PgdConfig cfg;
      cfg.steps = prov["pgd"].at("steps");
      cfg.step_size = prov["pgd"].at("step_size");
      cfg.epsilon = prov["pgd"].at("epsilon");
      phi.provenance_.pgd = cfg;
    }
    if (header.contains("head_labels")) {
      LinearHead head;
      head.labels = header["head_labels"].get<std::vector<int>>();
      phi.head_ = std::move(head);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint header: " + std::string(e.what()));
  }
  phi.arch_.validate();

  const auto n = get_uint(is, 8);
  if (n != phi.arch_.param_count()) throw IoError("checkpoint weight count mismatch");
  phi.params_.resize(n);
  for (auto& w : phi.params_) w = get_f32(is);

  const auto m = get_uint(is, 8);
  if (phi.head_) {
    const auto rows = static_cast<Eigen::Index>(phi.head_->labels.size());
    const Eigen::Index dim = phi.arch_.embedding_dim();
    if (m != static_cast<std::uint64_t>(rows * dim + rows)) {
      throw IoError("checkpoint head size mismatch");
    }
    phi.head_->weights.resize(rows, dim);
    phi.head_->bias.resize(rows);
    for (Eigen::Index i = 0; i < phi.head_->weights.size(); ++i) {
      phi.head_->weights.data()[i] = get_f32(is);
    }
    for (Eigen::Index i = 0; i < rows; ++i) phi.head_->bias[i] = get_f32(is);
  } else if (m != 0) {
    throw IoError("checkpoint carries head weights without labels");
  }
  return phi;
}

}  // namespace veil
