// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cdistill/encoders.hpp"
#include "cdistill/synthdata.hpp"

namespace cdistill {

enum class ProbeTask { kSegmentation, kDepth };
std::string to_string(ProbeTask t);
ProbeTask probe_task_from_string(const std::string& s);

/// Features are standardized per dimension with training-split statistics
/// before the linear map.
struct ProbeHead {
  ProbeTask task = ProbeTask::kSegmentation;
  RowMatrix feature_mean;   // 1 x D
  RowMatrix feature_scale;  // 1 x D, reciprocal standard deviation
  Linear linear;            // D x C, or D x 1 for depth

  RowMatrix standardize(const RowMatrix& features) const;

  int outputs() const { return static_cast<int>(linear.out_features()); }
  void validate(int feature_dim) const;
};

struct ProbeConfig {
  int epochs = 30;
  int batch_size = 8;
  double lr = 5e-2;
  int finetune_epochs = 4;
  /// Shared by head and encoder when fine-tuning.
  double finetune_lr = 1e-4;
  double weight_decay = 0.0;
  /// Valid depth pixels drawn per training sample for the depth probe.
  int depth_pixels_per_sample = 256;
  uint64_t seed = 11;

  void validate() const;
};

/// Per-condition values. "full" is computed from the pooled accumulators of
/// all evaluated samples.
struct ConditionMetrics {
  std::map<std::string, double> value;   // day_clear | day_rain | night | full
  std::map<std::string, int> samples;
  std::map<std::string, int64_t> pixels;
};

/// Labels per pixel (H*W), -1 where no point projects.
std::vector<int> project_labels(const Sample& sample);

struct MiouResult {
  double mean = 0.0;
  std::vector<double> per_class;  // NaN where the class never occurs
  int classes_counted = 0;
};

/// confusion[truth][prediction].
using Confusion = std::vector<std::vector<int64_t>>;
MiouResult miou(const Confusion& confusion);

// ---------------------------------------------------------------------------
// probe losses (exposed for gradient checking)

/// Mean softmax cross-entropy over rows; fills d loss / d logits.
double cross_entropy(const RowMatrix& logits, const std::vector<int>& labels, RowMatrix* logit_grad);
/// Mean squared error over rows of a single-column prediction.
double mean_squared_error(const RowMatrix& predictions, const Eigen::VectorXd& targets, RowMatrix* pred_grad);

/// Loss of one sample through the full 2D encoder, upsampling and head, at
/// the given pixels. When non-null, gradients accumulate into head_grad and
/// encoder_grad.
double probe_sample_loss(const ProbeHead& head, const EncoderParams2D& encoder, const RowMatrix& image, int height,
                         int width, const std::vector<int>& pixels, const std::vector<int>& labels,
                         const Eigen::VectorXd& depths, Linear* head_grad, EncoderParams2D* encoder_grad);

// ---------------------------------------------------------------------------
// probing

/// Which image feeds the encoder for evaluation.
struct EvalView {
  std::string name;  // "delivered" or "<corruption>@<severity>"
  std::optional<ImageCorruption> corruption;
  int severity = 0;
};

struct ProbeResult {
  ProbeHead head;
  EncoderParams2D encoder;  // the probed encoder (updated when fine-tuned)
  std::map<std::string, ConditionMetrics> views;  // keyed by EvalView::name
  std::vector<double> loss_trace;
};

/// Trains a linear head on the train split (and the encoder too when
/// `finetune`) and evaluates it on the validation split for each view.
/// Segmentation reports mIoU, depth reports RMSE in metres.
ProbeResult run_probe(ProbeTask task, const EncoderParams2D& encoder, const std::vector<Sample>& train,
                      const std::vector<Sample>& val, const ProbeConfig& config, bool finetune,
                      const std::vector<EvalView>& views);

ProbeResult probe_segmentation(const EncoderParams2D& encoder, const std::vector<Sample>& train,
                               const std::vector<Sample>& val, const ProbeConfig& config, bool finetune);
ProbeResult probe_depth(const EncoderParams2D& encoder, const std::vector<Sample>& train,
                        const std::vector<Sample>& val, const ProbeConfig& config, bool finetune);

/// All five corruption kinds at severities 1..max_severity, plus "delivered".
std::vector<EvalView> corruption_views(int max_severity);

/// Image shown to the encoder for a validation sample under a view.
RowMatrix view_image(const Sample& sample, const EvalView& view, uint64_t seed);

/// Evaluates a trained head; exposed for tests.
ConditionMetrics evaluate_probe(const ProbeHead& head, const EncoderParams2D& encoder,
                                const std::vector<Sample>& val, const EvalView& view, uint64_t seed);

// ---------------------------------------------------------------------------
// diagnostics

/// Mean over samples of the matched-pair distance loss, G as anchor, clean
/// images on the 2D side.
double matched_feature_distance(const EncoderParams2D& enc2d, const EncoderParams3D& enc3d,
                                const std::vector<Sample>& samples);

/// Mean over pixels of the l2-normalized feature map; one row per sample.
RowMatrix pooled_descriptors(const EncoderParams2D& enc2d, const std::vector<Sample>& samples);

struct ShiftReport {
  std::map<std::string, double> distance;  // "clear_night", "clear_rain"
  std::vector<std::string> missing;        // conditions without samples
  std::map<std::string, int> samples;
};

ShiftReport centroid_shift(const RowMatrix& descriptors, const std::vector<Condition>& conditions);
ShiftReport feature_shift_stats(const EncoderParams2D& enc2d, const std::vector<Sample>& samples);

struct ShiftComparison {
  ShiftReport before;
  ShiftReport after;
  std::map<std::string, double> relative_change;  // (after - before) / before
};

ShiftComparison compare_shift(const ShiftReport& before, const ShiftReport& after);

/// Mean over dimensions of the population standard deviation across rows.
double collapse_from_descriptors(const RowMatrix& descriptors);
double collapse_metric(const EncoderParams2D& enc2d, const std::vector<Sample>& samples);

/// Projects each pixel onto the top three principal components and min-max
/// scales every channel to [0, 1]. Channels without spread are 0.5.
RowMatrix render_feature_pca(const RowMatrix& feature_map);
void write_ppm(const std::filesystem::path& path, const RowMatrix& rgb, int height, int width);

// ---------------------------------------------------------------------------
// reporting

struct MetricRecord {
  std::string group;      // e.g. "seg/linear/delivered"
  std::string condition;  // day_clear | day_rain | night | full
  std::string metric;     // miou | rmse | ...
  double value = 0.0;
};

void add_condition_metrics(std::vector<MetricRecord>* out, const std::string& group, const std::string& metric,
                           const ConditionMetrics& m);

/// metrics.json nests group -> condition -> metric.
void write_metrics(const std::filesystem::path& dir, const std::string& run_id, const std::string& config_hash,
                   const std::vector<MetricRecord>& records);

}  // namespace cdistill
