#include "ssda/metrics.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "ssda/error.hpp"
#include "ssda/losses.hpp"

namespace ssda {

ConfusionMatrix::ConfusionMatrix(int num_classes) : classes_(num_classes) {
  if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(num_classes) * num_classes, 0);
}

std::size_t ConfusionMatrix::index(int truth, int predicted) const {
  if (truth < 0 || truth >= classes_ || predicted < 0 || predicted >= classes_)
    throw ShapeError("confusion matrix index out of range");
  return static_cast<std::size_t>(truth) * classes_ + predicted;
}

void ConfusionMatrix::add(int truth, int predicted, std::int64_t count) { counts_[index(truth, predicted)] += count; }

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw ShapeError("confusion matrix class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

double accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw ShapeError("empty confusion matrix");
  std::int64_t diag = 0;
  for (int c = 0; c < cm.num_classes(); ++c) diag += cm.at(c, c);
  return static_cast<double>(diag) / static_cast<double>(total);
}

std::vector<double> per_class_iou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ShapeError("empty confusion matrix");
  const int k = cm.num_classes();
  std::vector<double> iou(k);
  for (int c = 0; c < k; ++c) {
    std::int64_t fp = 0, fn = 0;
    for (int o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const auto tp = cm.at(c, c);
    const auto denom = tp + fp + fn;
    iou[c] = denom == 0 ? std::numeric_limits<double>::quiet_NaN()
                        : static_cast<double>(tp) / static_cast<double>(denom);
  }
  return iou;
}

double miou(const ConfusionMatrix& cm) {
  const auto iou = per_class_iou(cm);
  double sum = 0.0;
  int present = 0;
  for (int t = 0; t < cm.num_classes(); ++t) {
    std::int64_t truth = 0;
    for (int p = 0; p < cm.num_classes(); ++p) truth += cm.at(t, p);
    if (truth == 0) continue;
    sum += iou[t];
    ++present;
  }
  return sum / present;
}

nlohmann::json MetricsRecord::to_json() const {
  nlohmann::json iou = nlohmann::json::array();
  for (double v : per_class_iou) iou.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
  nlohmann::json rows = nlohmann::json::array();
  for (int t = 0; t < confusion.num_classes(); ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (int p = 0; p < confusion.num_classes(); ++p) row.push_back(confusion.at(t, p));
    rows.push_back(row);
  }
  return {{"domain", to_string(domain)},
          {"metric", task == Task::classification ? "accuracy" : "miou"},
          {"value", primary()},
          {"accuracy", accuracy},
          {"miou", miou},
          {"units", units},
          {"per_class_iou", iou},
          {"confusion", rows}};
}

std::vector<int> predict(Networks& nets, const Tensor& images) {
  const Tensor logits = forward_main(nets, images, Mode::eval);
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(logits.n()) * logits.plane());
  for (int n = 0; n < logits.n(); ++n)
    for (int y = 0; y < logits.h(); ++y)
      for (int x = 0; x < logits.w(); ++x) {
        int best = 0;
        for (int c = 1; c < logits.c(); ++c)
          if (logits.at(n, c, y, x) > logits.at(n, best, y, x)) best = c;
        out.push_back(best);
      }
  return out;
}

MetricsRecord evaluate(Networks& nets, const Dataset& dataset, int batch_size) {
  if (dataset.task != nets.task) throw ConfigError("dataset task does not match the model's task");
  if (dataset.num_classes != nets.num_classes) throw ConfigError("dataset class count does not match the model");
  if (dataset.samples.empty()) throw ConfigError("cannot evaluate an empty dataset");
  MetricsRecord rec;
  rec.domain = dataset.domain;
  rec.task = dataset.task;
  rec.confusion = ConfusionMatrix(dataset.num_classes);
  for (std::size_t begin = 0; begin < dataset.size(); begin += batch_size) {
    const std::size_t end = std::min(dataset.size(), begin + batch_size);
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const auto pred = predict(nets, to_tensor(dataset, idx));
    std::size_t k = 0;
    for (auto i : idx) {
      const auto& s = dataset.samples[i];
      if (dataset.task == Task::classification) {
        rec.confusion.add(s.class_id, pred[k++]);
      } else {
        for (int label : s.label_map) {
          const int p = pred[k++];
          if (label != kIgnoreLabel) rec.confusion.add(label, p);
        }
      }
    }
  }
  rec.units = rec.confusion.total();
  rec.accuracy = ssda::accuracy(rec.confusion);
  rec.per_class_iou = ssda::per_class_iou(rec.confusion);
  rec.miou = ssda::miou(rec.confusion);
  return rec;
}

namespace {

// Most frequent non-background class of a label map, 0 when there is none.
int dominant_label(const std::vector<int>& labels, int num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int v : labels)
    if (v > 0 && v < num_classes) ++counts[v];
  int best = 0;
  for (int c = 1; c < num_classes; ++c)
    if (counts[c] > counts[best]) best = c;
  return counts[best] > 0 ? best : 0;
}

}  // namespace

std::vector<EmbeddingRow> compute_embeddings(Networks& nets, const Dataset& dataset, int batch_size) {
  std::vector<EmbeddingRow> rows;
  GlobalAvgPool pool;
  for (std::size_t begin = 0; begin < dataset.size(); begin += batch_size) {
    const std::size_t end = std::min(dataset.size(), begin + batch_size);
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const Tensor pooled = pool.forward(tap_features(nets, to_tensor(dataset, idx), Mode::eval), Mode::eval);
    for (int n = 0; n < pooled.n(); ++n) {
      const auto& s = dataset.samples[idx[n]];
      EmbeddingRow row;
      row.feature.resize(pooled.c());
      for (int c = 0; c < pooled.c(); ++c) row.feature[c] = pooled.at(n, c, 0, 0);
      row.label = dataset.task == Task::classification ? s.class_id : dominant_label(s.label_map, dataset.num_classes);
      row.domain = s.domain;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void write_embeddings_csv(const std::filesystem::path& path, const std::vector<EmbeddingRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const std::size_t dim = rows.empty() ? 0 : rows.front().feature.size();
  for (std::size_t d = 0; d < dim; ++d) out << 'f' << d << ',';
  out << "label,domain\n";
  out.precision(17);
  for (const auto& r : rows) {
    if (r.feature.size() != dim) throw ShapeError("embedding rows of different dimension");
    for (double v : r.feature) out << v << ',';
    out << r.label << ',' << to_string(r.domain) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace ssda
