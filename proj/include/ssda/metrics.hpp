#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"
#include "ssda/data.hpp"
#include "ssda/model.hpp"

namespace ssda {

// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void add(int truth, int predicted, std::int64_t count = 1);
  std::int64_t at(int truth, int predicted) const { return counts_[index(truth, predicted)]; }
  int num_classes() const { return classes_; }
  std::int64_t total() const;

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t index(int truth, int predicted) const;
  int classes_;
  std::vector<std::int64_t> counts_;
};

double accuracy(const ConfusionMatrix& cm);
// TP / (TP + FP + FN); classes absent from both truth and prediction get NaN.
std::vector<double> per_class_iou(const ConfusionMatrix& cm);
// Mean IoU over classes that appear in the ground truth.
double miou(const ConfusionMatrix& cm);

struct MetricsRecord {
  Domain domain = Domain::target;
  Task task = Task::classification;
  std::int64_t units = 0;  // samples or supervised pixels
  double accuracy = 0.0;
  double miou = 0.0;
  std::vector<double> per_class_iou;
  ConfusionMatrix confusion{2};

  // Headline number: accuracy for classification, mIoU for segmentation.
  double primary() const { return task == Task::classification ? accuracy : miou; }
  nlohmann::json to_json() const;
};

// Eval-mode predictions over the whole dataset; IGNORE pixels excluded.
MetricsRecord evaluate(Networks& nets, const Dataset& dataset, int batch_size = 50);

// Argmax class per sample (classification) or per pixel (segmentation).
std::vector<int> predict(Networks& nets, const Tensor& images);

struct EmbeddingRow {
  std::vector<double> feature;
  int label = -1;
  Domain domain = Domain::source;
};

// One globally pooled tap feature per image.
std::vector<EmbeddingRow> compute_embeddings(Networks& nets, const Dataset& dataset, int batch_size = 50);
// CSV with header f0,...,f{D-1},label,domain.
void write_embeddings_csv(const std::filesystem::path& path, const std::vector<EmbeddingRow>& rows);

}  // namespace ssda
