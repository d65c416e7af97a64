#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "slim/dataset.hpp"
#include "slim/embed.hpp"
#include "slim/scorer.hpp"

namespace slim::rec {

enum class Mode { IdOnly, IdText, Slim, Agnostic };
enum class Backbone { Mean, Gru, Attention };
enum class PairMode { AllPrefixes, LastOnly };
enum class BackboneInput { Fused, Id };
enum class OptimizerKind { Sgd, Adam };

std::string_view to_string(Mode m);
std::string_view to_string(Backbone b);
std::string_view to_string(PairMode p);
std::string_view to_string(BackboneInput b);
std::string_view to_string(OptimizerKind o);
Mode parse_mode(std::string_view s);
Backbone parse_backbone(std::string_view s);
PairMode parse_pair_mode(std::string_view s);
BackboneInput parse_backbone_input(std::string_view s);
OptimizerKind parse_optimizer(std::string_view s);

struct ModelConfig {
  Mode mode = Mode::IdOnly;
  Backbone backbone = Backbone::Mean;
  std::size_t id_dim = 64;
  std::size_t text_dim = 768;
  std::size_t match_dim = 64;  // output width of the text transform in agnostic mode
  std::size_t max_seq_len = 50;
  double learning_rate = 0.5;
  std::size_t epochs = 10;
  std::size_t negatives = 1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;
  PairMode pairs = PairMode::AllPrefixes;
  BackboneInput backbone_input = BackboneInput::Fused;
  OptimizerKind optimizer = OptimizerKind::Sgd;

  void validate() const;
  bool uses_item_text() const { return mode != Mode::IdOnly; }
  bool uses_rationale() const { return mode == Mode::Slim || mode == Mode::Agnostic; }
  /// Width of item and sequence representations.
  std::size_t rep_dim() const { return mode == Mode::Agnostic ? match_dim : id_dim; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Dense row-major array.
struct Tensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::string n, std::size_t r, std::size_t c) : name(std::move(n)), rows(r), cols(c), data(r * c, 0.0) {}

  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }
};

/// Every trainable array. All groups are allocated for every mode so that
/// checkpoints share one layout; unused groups simply receive no gradient.
struct ParameterSet {
  Tensor item_id;  // |items| × d_id

  Tensor gru_wz, gru_uz, gru_bz;
  Tensor gru_wr, gru_ur, gru_br;
  Tensor gru_wn, gru_un, gru_bn;

  Tensor attn_pos;  // L × d_id
  Tensor attn_wq, attn_wk, attn_wv, attn_wo;

  Tensor gl_w, gl_b;  // text → d_id
  Tensor gf_w, gf_b;  // [text part; id part] (2·d_id) → d_id
  Tensor gt_w, gt_b;  // text → d_m

  static ParameterSet allocate(const ModelConfig& cfg, std::size_t n_items);
  /// Uniform in ±1/√fan_in for linear maps, ±1/√d_id for embedding rows; seeded.
  static ParameterSet init(const ModelConfig& cfg, std::size_t n_items);

  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  void set_zero();
  bool all_finite() const;
  bool operator==(const ParameterSet& other) const;
};

/// Reference to one item as the model sees it.
struct ItemRef {
  std::int64_t id = -1;          // row in the ID table, -1 when outside the vocabulary
  const double* text = nullptr;  // text vector of length text_dim, or null
};

/// z_i for one item. Throws UnscorableError when the mode's inputs are missing.
std::vector<double> item_encode(const ParameterSet& params, const ModelConfig& cfg, const ItemRef& item);

/// s_u from item representations (most recent last) and an optional rationale vector.
std::vector<double> seq_encode(const ParameterSet& params, const ModelConfig& cfg,
                               const std::vector<std::vector<double>>& item_reps, const double* rationale);

/// sigmoid(s·z), computed without overflow.
double predict_score(std::span<const double> s, std::span<const double> z);

double sigmoid(double x);

/// −[y ln ŷ + (1−y) ln(1−ŷ)] with ŷ = sigmoid(logit), in the stable softplus form.
double bce_with_logit(double logit, int label);

/// Same loss from a probability (clamped away from 0 and 1).
double bce_loss(double probability, int label);

/// One scored training instance: a history and labelled candidates.
struct Example {
  std::vector<ItemRef> history;  // chronological; truncated to the last max_seq_len
  const double* rationale = nullptr;
  std::vector<ItemRef> candidates;
  std::vector<int> labels;
};

/// Mean BCE over every (example, candidate) term. When `grad` is non-null it
/// receives d(loss)/d(params) (accumulated; caller zeroes it).
double batch_loss(const ParameterSet& params, const ModelConfig& cfg, std::span<const Example> batch,
                  ParameterSet* grad);

/// Item id ↔ row of the ID table.
class ItemVocabulary {
 public:
  ItemVocabulary() = default;
  explicit ItemVocabulary(std::vector<std::string> ids);  // sorted and de-duplicated

  std::int64_t index(const std::string& id) const;  // -1 if absent
  const std::vector<std::string>& ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::int64_t> index_;
};

struct TrainResult {
  ItemVocabulary vocab;  // every catalog item
  ParameterSet params;
  std::vector<double> loss_trace;  // mean loss per epoch
  std::size_t pairs = 0;           // positive pairs per epoch
};

/// Trains on the train prefixes of `split`. The ID table covers every catalog
/// item; items that never occur in a train prefix keep an all-zero ID row.
/// Text and rationale vectors come from `store` ("item:<id>", "user:<id>")
/// when the mode needs them.
TrainResult train(const SplitDataset& split, const ItemTable& catalog, const embed::EmbeddingStore* store,
                  const ModelConfig& cfg);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
  bool passed = false;
};

/// Compares analytic gradients with central finite differences (h = 1e-5) on a
/// small random model (d ≤ 8, sequences ≤ 5) built from `cfg`'s mode and backbone.
GradCheckReport grad_check(const ModelConfig& cfg, double tolerance);

/// A trained model bound to its vocabulary.
class SequentialRecommender final : public Scorer {
 public:
  SequentialRecommender(ModelConfig cfg, ItemVocabulary vocab, ParameterSet params);

  /// Binds text vectors for scoring; required for text-using modes.
  void attach_store(std::shared_ptr<const embed::EmbeddingStore> store);

  std::vector<double> score(const std::string& user, const std::vector<std::string>& history,
                            const std::vector<std::string>& candidates) const override;

  const ModelConfig& config() const { return cfg_; }
  const ItemVocabulary& vocab() const { return vocab_; }
  const ParameterSet& params() const { return params_; }

  /// Magic line, JSON header line, then the raw little-endian doubles of every tensor.
  void save(const std::filesystem::path& path, const nlohmann::json& metadata = {}) const;
  static SequentialRecommender load(const std::filesystem::path& path, nlohmann::json* metadata = nullptr);

 private:
  ItemRef ref(const std::string& item_id) const;
  const std::vector<double>& cached_rep(std::int64_t row) const;

  ModelConfig cfg_;
  ItemVocabulary vocab_;
  ParameterSet params_;
  std::shared_ptr<const embed::EmbeddingStore> store_;
  std::vector<std::vector<double>> item_reps_;  // precomputed for vocabulary rows
};

}  // namespace slim::rec
