#include "probdrop/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace probdrop::toy {

namespace {

constexpr std::size_t kPlane = kImageSize * kImageSize;
constexpr std::size_t kKernel = 9;

// Dataset shape. Each image carries several full-length stripes of its class
// orientation with jittered contrast, under strong pixel noise.
constexpr std::size_t kBarLength = 16;
constexpr double kBarIntensity = 0.5;
constexpr double kNoiseSigma = 0.30;
constexpr double kBackground = 0.2;
constexpr std::size_t kBars = 8;
constexpr double kJitter = 0.8;

constexpr std::uint64_t kDataStream = 0xDA7A;
constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kShuffleStream = 0x5AFF;
constexpr std::uint64_t kDropStream = 0xD409;

double normal(SliceRng& rng) {
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u = 1.0 - rng.uniform();
  const double v = rng.uniform();
  return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * std::numbers::pi * v);
}

std::size_t below(SliceRng& rng, std::size_t n) {
  return static_cast<std::size_t>(rng.uniform() * static_cast<double>(n));
}

void draw_image(SliceRng& rng, int label, std::span<double> px) {
  for (double& p : px) p = kBackground + kNoiseSigma * normal(rng);
  const bool horizontal = label == 0;
  for (std::size_t bar = 0; bar < kBars; ++bar) {
    const double level = kBarIntensity * (1.0 - kJitter * rng.uniform());
    const std::size_t across = below(rng, kImageSize);
    const std::size_t start = below(rng, kImageSize - kBarLength + 1);
    for (std::size_t k = 0; k < kBarLength; ++k) {
      const std::size_t i = horizontal ? across : start + k;
      const std::size_t j = horizontal ? start + k : across;
      px[i * kImageSize + j] += level;
    }
  }
  for (double& p : px) p = std::clamp(p, 0.0, 1.0);
}

void make_split(SliceRng& rng, std::size_t n, FeatureMap& images, std::vector<int>& labels) {
  images = FeatureMap(Dims{n, 1, kImageSize, kImageSize});
  labels.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    labels[k] = static_cast<int>(k % 2);
    draw_image(rng, labels[k], images.plane_view(k, 0));
  }
}

// 3x3 convolution with zero padding 1 over square kImageSize maps.
void conv_forward(std::span<const double> in, std::size_t batch, std::size_t in_ch, std::span<const double> w,
                  std::span<const double> bias, std::size_t out_ch, std::span<double> out) {
  constexpr std::ptrdiff_t n = kImageSize;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_ch; ++o) {
      double* dst = out.data() + (b * out_ch + o) * kPlane;
      std::fill(dst, dst + kPlane, bias[o]);
      for (std::size_t i = 0; i < in_ch; ++i) {
        const double* src = in.data() + (b * in_ch + i) * kPlane;
        const double* k = w.data() + (o * in_ch + i) * kKernel;
        for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
          for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
            const double wt = k[ky * 3 + kx];
            const std::ptrdiff_t dy = ky - 1, dx = kx - 1;
            const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy), y1 = std::min(n, n - dy);
            const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(n, n - dx);
            for (std::ptrdiff_t y = y0; y < y1; ++y) {
              double* row = dst + y * n;
              const double* srow = src + (y + dy) * n + dx;
              for (std::ptrdiff_t x = x0; x < x1; ++x) row[x] += wt * srow[x];
            }
          }
        }
      }
    }
  }
}

// Accumulates weight/bias gradients and (optionally) the input gradient.
void conv_backward(std::span<const double> in, std::size_t batch, std::size_t in_ch, std::span<const double> w,
                   std::size_t out_ch, std::span<const double> grad_out, std::span<double> grad_w,
                   std::span<double> grad_b, std::span<double> grad_in) {
  constexpr std::ptrdiff_t n = kImageSize;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out_ch; ++o) {
      const double* g = grad_out.data() + (b * out_ch + o) * kPlane;
      double gb = 0.0;
      for (std::size_t p = 0; p < kPlane; ++p) gb += g[p];
      grad_b[o] += gb;
      for (std::size_t i = 0; i < in_ch; ++i) {
        const double* src = in.data() + (b * in_ch + i) * kPlane;
        double* gin = grad_in.empty() ? nullptr : grad_in.data() + (b * in_ch + i) * kPlane;
        const double* k = w.data() + (o * in_ch + i) * kKernel;
        double* gk = grad_w.data() + (o * in_ch + i) * kKernel;
        for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
          for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
            const std::ptrdiff_t dy = ky - 1, dx = kx - 1;
            const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy), y1 = std::min(n, n - dy);
            const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(n, n - dx);
            const double wt = k[ky * 3 + kx];
            double acc = 0.0;
            for (std::ptrdiff_t y = y0; y < y1; ++y) {
              const double* grow = g + y * n;
              const double* srow = src + (y + dy) * n + dx;
              for (std::ptrdiff_t x = x0; x < x1; ++x) acc += grow[x] * srow[x];
              if (gin) {
                double* girow = gin + (y + dy) * n + dx;
                for (std::ptrdiff_t x = x0; x < x1; ++x) girow[x] += wt * grow[x];
              }
            }
            gk[ky * 3 + kx] += acc;
          }
        }
      }
    }
  }
}

std::vector<double> softmax_row(const double* z) {
  const double m = std::max(z[0], z[1]);
  const double e0 = std::exp(z[0] - m), e1 = std::exp(z[1] - m);
  return {e0 / (e0 + e1), e1 / (e0 + e1)};
}

void check_labels(const ForwardCache& cache, std::span<const int> labels) {
  if (labels.size() != cache.input.dims().batch) throw GeometryError("label count does not match batch");
  for (int l : labels) {
    if (l < 0 || l >= static_cast<int>(kClasses)) throw std::invalid_argument("label out of range");
  }
}

}  // namespace

SyntheticDataset make_dataset(std::uint64_t seed, std::size_t n_train, std::size_t n_val) {
  if (n_train < 2 || n_val < 2) throw std::invalid_argument("dataset splits need at least 2 samples");
  SyntheticDataset ds;
  auto train_rng = RngStream{seed, kDataStream}.substream(0, 0);
  auto val_rng = RngStream{seed, kDataStream}.substream(1, 0);
  make_split(train_rng, n_train, ds.train_images, ds.train_labels);
  make_split(val_rng, n_val, ds.val_images, ds.val_labels);
  return ds;
}

TinyNet TinyNet::zeros() {
  return TinyNet{std::vector<double>(kFilters * kKernel, 0.0), std::vector<double>(kFilters, 0.0),
                 std::vector<double>(kFilters * kFilters * kKernel, 0.0), std::vector<double>(kFilters, 0.0),
                 std::vector<double>(kClasses * kFilters, 0.0), std::vector<double>(kClasses, 0.0)};
}

TinyNet TinyNet::init(std::uint64_t seed) {
  TinyNet net = zeros();
  auto rng = RngStream{seed, kInitStream}.substream(0, 0);
  auto fill = [&](std::vector<double>& w, double fan_in) {
    const double sd = std::sqrt(2.0 / fan_in);
    for (double& v : w) v = sd * normal(rng);
  };
  fill(net.conv1_w, kKernel);
  fill(net.conv2_w, kKernel * kFilters);
  fill(net.fc_w, kFilters);
  return net;
}

std::vector<std::span<double>> TinyNet::tensors() {
  return {conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b};
}

std::vector<std::span<const double>> TinyNet::tensors() const {
  return {conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b};
}

std::size_t TinyNet::parameter_count() const {
  std::size_t n = 0;
  for (auto t : tensors()) n += t.size();
  return n;
}

FeatureMap take_rows(const FeatureMap& images, std::span<const std::size_t> rows) {
  const auto& d = images.dims();
  FeatureMap out(Dims{rows.size(), d.channel, d.height, d.width});
  const std::size_t item = d.channel * d.plane_size();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= d.batch) throw GeometryError("row index out of range");
    auto src = images.data().subspan(rows[r] * item, item);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * item));
  }
  return out;
}

ForwardCache forward_fixed(const TinyNet& net, const FeatureMap& images, std::optional<DropSite> site) {
  const auto& d = images.dims();
  if (d.channel != 1 || d.height != kImageSize || d.width != kImageSize) {
    throw GeometryError("TinyNet expects (N, 1, 16, 16) input, got " + to_string(d));
  }
  const std::size_t batch = d.batch;
  const Dims hidden{batch, kFilters, kImageSize, kImageSize};
  if (site && (site->mask.dims() != hidden || site->scales.size() != hidden.num_planes())) {
    throw GeometryError("drop site does not match hidden shape " + to_string(hidden));
  }

  ForwardCache c;
  c.input = images;
  c.conv1_out = FeatureMap(hidden);
  conv_forward(images.data(), batch, 1, net.conv1_w, net.conv1_b, kFilters, c.conv1_out.data());

  c.dropped = FeatureMap(hidden);
  {
    auto z = c.conv1_out.data();
    auto h = c.dropped.data();
    for (std::size_t k = 0; k < z.size(); ++k) {
      const double r = z[k] > 0.0 ? z[k] : 0.0;
      if (!site) {
        h[k] = r;
      } else {
        h[k] = site->mask.bits()[k] ? r * site->scales[k / kPlane] : 0.0;
      }
    }
  }
  c.site = std::move(site);

  c.conv2_out = FeatureMap(hidden);
  conv_forward(c.dropped.data(), batch, kFilters, net.conv2_w, net.conv2_b, kFilters, c.conv2_out.data());

  c.pooled.assign(batch * kFilters, 0.0);
  auto z2 = c.conv2_out.data();
  for (std::size_t p = 0; p < batch * kFilters; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < kPlane; ++k) s += z2[p * kPlane + k];
    c.pooled[p] = s / static_cast<double>(kPlane);
  }

  c.logits.assign(batch * kClasses, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < kClasses; ++k) {
      double s = net.fc_b[k];
      for (std::size_t f = 0; f < kFilters; ++f) s += net.fc_w[k * kFilters + f] * c.pooled[b * kFilters + f];
      c.logits[b * kClasses + k] = s;
    }
  }
  return c;
}

ForwardCache forward(const TinyNet& net, const FeatureMap& images, const std::optional<DropSpec>& spec,
                     const ScheduleState& sched, const RngStream& rng) {
  if (!spec || spec->mode == Mode::Inference) return forward_fixed(net, images, std::nullopt);

  // The drop site sits after conv1's rectifier; sample it on that activation.
  const auto& d = images.dims();
  if (d.channel != 1 || d.height != kImageSize || d.width != kImageSize) {
    throw GeometryError("TinyNet expects (N, 1, 16, 16) input, got " + to_string(d));
  }
  FeatureMap hidden(Dims{d.batch, kFilters, kImageSize, kImageSize});
  conv_forward(images.data(), d.batch, 1, net.conv1_w, net.conv1_b, kFilters, hidden.data());
  for (double& v : hidden.data()) v = v > 0.0 ? v : 0.0;
  auto drop = apply(hidden, *spec, sched, rng);
  return forward_fixed(net, images, DropSite{std::move(drop.mask), std::move(drop.scales)});
}

double loss(const ForwardCache& cache, std::span<const int> labels) {
  check_labels(cache, labels);
  double total = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const double* z = cache.logits.data() + b * kClasses;
    const double m = std::max(z[0], z[1]);
    const double lse = m + std::log(std::exp(z[0] - m) + std::exp(z[1] - m));
    total += lse - z[labels[b]];
  }
  return total / static_cast<double>(labels.size());
}

TinyNet backward(const TinyNet& net, const ForwardCache& cache, std::span<const int> labels) {
  check_labels(cache, labels);
  const std::size_t batch = labels.size();
  const double inv_batch = 1.0 / static_cast<double>(batch);
  TinyNet g = TinyNet::zeros();

  std::vector<double> grad_pool(batch * kFilters, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    auto p = softmax_row(cache.logits.data() + b * kClasses);
    for (std::size_t k = 0; k < kClasses; ++k) {
      const double dz = (p[k] - (labels[b] == static_cast<int>(k) ? 1.0 : 0.0)) * inv_batch;
      g.fc_b[k] += dz;
      for (std::size_t f = 0; f < kFilters; ++f) {
        g.fc_w[k * kFilters + f] += dz * cache.pooled[b * kFilters + f];
        grad_pool[b * kFilters + f] += dz * net.fc_w[k * kFilters + f];
      }
    }
  }

  const std::size_t hidden = batch * kFilters * kPlane;
  std::vector<double> grad_z2(hidden);
  auto z2 = cache.conv2_out.data();
  for (std::size_t k = 0; k < hidden; ++k) {
    grad_z2[k] = grad_pool[k / kPlane] / static_cast<double>(kPlane);
  }

  std::vector<double> grad_dropped(hidden, 0.0);
  conv_backward(cache.dropped.data(), batch, kFilters, net.conv2_w, kFilters, grad_z2, g.conv2_w, g.conv2_b,
                grad_dropped);

  // Drop site: upstream gradient times mask times the slice's scale.
  std::vector<double> grad_z1(hidden);
  auto z1 = cache.conv1_out.data();
  for (std::size_t k = 0; k < hidden; ++k) {
    double gk = grad_dropped[k];
    if (cache.site) gk = cache.site->mask.bits()[k] ? gk * cache.site->scales[k / kPlane] : 0.0;
    grad_z1[k] = z1[k] > 0.0 ? gk : 0.0;
  }
  conv_backward(cache.input.data(), batch, 1, net.conv1_w, kFilters, grad_z1, g.conv1_w, g.conv1_b, {});
  return g;
}

double accuracy(const TinyNet& net, const FeatureMap& images, std::span<const int> labels) {
  const std::size_t n = images.dims().batch;
  if (labels.size() != n) throw GeometryError("label count does not match batch");
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t first = 0; first < n; first += kChunk) {
    rows.clear();
    for (std::size_t r = first; r < std::min(n, first + kChunk); ++r) rows.push_back(r);
    const auto c = forward_fixed(net, take_rows(images, rows), std::nullopt);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const int pred = c.logits[k * kClasses + 1] > c.logits[k * kClasses] ? 1 : 0;
      correct += pred == labels[rows[k]];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

void validate(const TrainConfig& config) {
  if (!(config.learning_rate > 0.0) || !std::isfinite(config.learning_rate)) {
    throw std::invalid_argument("learning rate must be > 0");
  }
  if (config.epochs == 0) throw std::invalid_argument("epochs must be >= 1");
  if (config.batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  if (config.spec) validate(*config.spec, Dims{1, kFilters, kImageSize, kImageSize});
}

double Metrics::final_gap() const {
  if (epochs.empty()) return 0.0;
  return epochs.back().train_acc - epochs.back().val_acc;
}

Metrics train(const TrainConfig& config) {
  TinyNet net;
  return train(config, net);
}

Metrics train(const TrainConfig& config, TinyNet& net) {
  validate(config);
  const auto data = make_dataset(config.seed, config.n_train, config.n_val);
  net = TinyNet::init(config.seed);

  const std::size_t n = config.n_train;
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::uint64_t total_steps = config.epochs * steps_per_epoch;
  const double target = config.spec ? config.spec->alpha : 0.0;

  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < n; ++k) order[k] = k;
  auto shuffle_rng = RngStream{config.seed, kShuffleStream}.substream(0, 0);

  Metrics m;
  std::uint64_t step = 0;
  std::vector<std::size_t> rows;
  std::vector<int> labels;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t k = n - 1; k > 0; --k) std::swap(order[k], order[below(shuffle_rng, k + 1)]);

    double loss_sum = 0.0;
    for (std::size_t first = 0; first < n; first += config.batch_size, ++step) {
      rows.assign(order.begin() + static_cast<std::ptrdiff_t>(first),
                  order.begin() + static_cast<std::ptrdiff_t>(std::min(n, first + config.batch_size)));
      labels.clear();
      for (auto r : rows) labels.push_back(data.train_labels[r]);

      const ScheduleState sched = config.linear_schedule ? ScheduleState{target, total_steps, step}
                                                         : ScheduleState{target, 1, 1};
      const auto cache = forward(net, take_rows(data.train_images, rows), config.spec, sched,
                                 RngStream{config.seed ^ kDropStream, step});
      const double l = loss(cache, labels);
      if (!std::isfinite(l)) {
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(step) + "; try a smaller learning rate");
      }
      loss_sum += l;
      const auto grad = backward(net, cache, labels);
      auto params = net.tensors();
      auto grads = grad.tensors();
      for (std::size_t t = 0; t < params.size(); ++t) {
        for (std::size_t k = 0; k < params[t].size(); ++k) params[t][k] -= config.learning_rate * grads[t][k];
      }
    }
    m.epochs.push_back(EpochMetrics{epoch, loss_sum / static_cast<double>(steps_per_epoch),
                                    accuracy(net, data.train_images, data.train_labels),
                                    accuracy(net, data.val_images, data.val_labels)});
  }
  return m;
}

std::string metrics_csv(const Metrics& m) {
  std::ostringstream out;
  out << "epoch,train_loss,train_acc,val_acc\n" << std::fixed << std::setprecision(6);
  for (const auto& e : m.epochs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.train_acc << ',' << e.val_acc << '\n';
  }
  return out.str();
}

void write_metrics_csv(const Metrics& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << metrics_csv(m);
  if (!out) throw std::runtime_error("write to " + path.string() + " failed");
}

}  // namespace probdrop::toy
