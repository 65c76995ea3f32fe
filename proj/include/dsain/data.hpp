#pragma once

#include <functional>
#include <json.hpp>

#include "dsain/config.hpp"
#include "dsain/tensor.hpp"

namespace dsain {

/// Behavior-type field conventions (situational field 0).
inline constexpr std::int64_t kPaddingId = 0;
inline constexpr std::int64_t kClickId = 1;
inline constexpr std::int64_t kExposureId = 2;

struct Situation {
  std::vector<std::int64_t> ids;  // one id per situational feature field
  bool operator==(const Situation&) const = default;
};

/// Fixed-length history plus the candidate. Padding occupies a contiguous
/// prefix (the oldest positions) and carries the reserved id 0 everywhere.
struct BehaviorSequence {
  std::vector<std::int64_t> item_ids;
  std::vector<Situation> situations;
  std::vector<std::uint8_t> mask;  // 1 = real behavior, 0 = padding
  std::int64_t candidate_item = 0;
  Situation candidate_situation;

  std::int64_t length() const { return static_cast<std::int64_t>(item_ids.size()); }

  std::int64_t real_count() const {
    std::int64_t c = 0;
    for (auto m : mask) c += m;
    return c;
  }

  bool operator==(const BehaviorSequence&) const = default;
};

struct TrainRecord {
  std::int64_t user_id = 0;
  BehaviorSequence sequence;
  int label = 0;

  bool operator==(const TrainRecord&) const = default;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// ---------------------------------------------------------------------------
// Synthetic data with a planted situational signal
// ---------------------------------------------------------------------------

/// Every user carries a latent preferred situation cell per item cluster
/// (field 1). A candidate whose request cell matches the preference of its
/// cluster clicks with probability pos_rate + swing, otherwise pos_rate -
/// swing, where swing scales with signal_strength. The match coin is fair,
/// so the label carries no information reachable without situational
/// features, and the positive rate stays at pos_rate for any
/// signal_strength.
struct SynthSpec {
  std::int64_t num_users = 200;
  std::int64_t num_items = 500;
  std::vector<std::int64_t> situ_vocab = {3, 5, 7};  // field 0 = behavior type
  std::int64_t L = 30;
  std::int64_t len_min = 20;
  std::int64_t len_max = 30;
  double noise_rate = 0.5;       // fraction of history positions that are exposures
  double signal_strength = 0.8;  // in [0,1]
  double pos_rate = 0.5;
  std::int64_t clusters = 4;
  bool correlated_fields = true;  // fields past 1 echo the cell (hour vs meal period)
  std::uint64_t seed = 1;

  std::int64_t fields() const { return static_cast<std::int64_t>(situ_vocab.size()); }
  std::int64_t cells() const { return situ_vocab[1] - 1; }

  void validate() const {
    require(num_users >= 1 && num_items >= 2, "synth: need users and at least two items");
    require(situ_vocab.size() >= 2, "synth: need a behavior-type field and a cell field");
    for (std::size_t k = 0; k < situ_vocab.size(); ++k)
      require(situ_vocab[k] >= 2, "synth: situ_vocab[" + std::to_string(k) + "] must be >= 2");
    require(situ_vocab[0] >= 3, "synth: behavior-type field needs padding+click+exposure ids");
    require(cells() >= 2, "synth: field 1 needs at least two non-padding cells");
    require(L >= 1 && len_min >= 1 && len_min <= len_max && len_max <= L,
            "synth: length range must satisfy 1 <= len_min <= len_max <= L");
    require(noise_rate >= 0.0 && noise_rate <= 1.0, "synth: noise_rate outside [0,1]");
    require(signal_strength >= 0.0 && signal_strength <= 1.0,
            "synth: signal_strength outside [0,1]");
    require(pos_rate > 0.0 && pos_rate < 1.0, "synth: pos_rate outside (0,1)");
    require(clusters >= 2 && clusters <= num_items, "synth: clusters outside [2, num_items]");
  }
};

class SynthGenerator {
 public:
  explicit SynthGenerator(SynthSpec spec) : spec_(std::move(spec)), rng_(spec_.seed) {
    spec_.validate();
    double swing = 0.9 * spec_.signal_strength * std::min(spec_.pos_rate, 1.0 - spec_.pos_rate);
    p_match_ = spec_.pos_rate + swing;
    p_nomatch_ = spec_.pos_rate - swing;
  }

  const SynthSpec& spec() const { return spec_; }

  TrainRecord next() {
    TrainRecord rec;
    rec.user_id = rng_.uniform_int(1, spec_.num_users);
    std::int64_t len = rng_.uniform_int(spec_.len_min, spec_.len_max);
    std::int64_t pad = spec_.L - len;

    BehaviorSequence& seq = rec.sequence;
    seq.item_ids.assign(static_cast<std::size_t>(spec_.L), 0);
    seq.situations.assign(static_cast<std::size_t>(spec_.L),
                          Situation{std::vector<std::int64_t>(
                              static_cast<std::size_t>(spec_.fields()), 0)});
    seq.mask.assign(static_cast<std::size_t>(spec_.L), 0);

    for (std::int64_t i = pad; i < spec_.L; ++i) {
      auto ui = static_cast<std::size_t>(i);
      seq.mask[ui] = 1;
      auto& ids = seq.situations[ui].ids;
      if (rng_.uniform() < spec_.noise_rate) {
        seq.item_ids[ui] = rng_.uniform_int(1, spec_.num_items);
        ids[0] = kExposureId;
        ids[1] = rng_.uniform_int(1, spec_.cells());
      } else {
        std::int64_t g = rng_.uniform_int(0, spec_.clusters - 1);
        seq.item_ids[ui] = item_in_cluster(g);
        ids[0] = kClickId;
        ids[1] = pref_cell(rec.user_id, g);
      }
      for (std::int64_t k = 2; k < spec_.fields(); ++k)
        ids[static_cast<std::size_t>(k)] = derived_field(k, ids[1]);
    }

    bool match = rng_.uniform() < 0.5;
    std::int64_t g = rng_.uniform_int(0, spec_.clusters - 1);
    seq.candidate_item = item_in_cluster(g);
    auto& cids = seq.candidate_situation.ids;
    cids.assign(static_cast<std::size_t>(spec_.fields()), 0);
    cids[0] = kClickId;
    std::int64_t pref = pref_cell(rec.user_id, g);
    if (match) {
      cids[1] = pref;
    } else {
      std::int64_t c = rng_.uniform_int(1, spec_.cells() - 1);
      cids[1] = c >= pref ? c + 1 : c;
    }
    for (std::int64_t k = 2; k < spec_.fields(); ++k)
      cids[static_cast<std::size_t>(k)] = derived_field(k, cids[1]);

    rec.label = rng_.uniform() < (match ? p_match_ : p_nomatch_) ? 1 : 0;
    return rec;
  }

  std::vector<TrainRecord> take(std::int64_t count) {
    std::vector<TrainRecord> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) out.push_back(next());
    return out;
  }

  /// Reads the latent preference table directly; upper-bounds what any model
  /// can learn from this generator.
  double bayes_score(const TrainRecord& rec) const {
    std::int64_t g = cluster_of(rec.sequence.candidate_item);
    std::int64_t cell = rec.sequence.candidate_situation.ids[1];
    return pref_cell(rec.user_id, g) == cell ? p_match_ : p_nomatch_;
  }

  std::int64_t cluster_of(std::int64_t item) const { return (item - 1) % spec_.clusters; }

 private:
  std::int64_t pref_cell(std::int64_t user, std::int64_t cluster) const {
    std::uint64_t h = splitmix64(spec_.seed ^ (0x5851f42d4c957f2dULL * static_cast<std::uint64_t>(user)) ^
                                 (0x14057b7ef767814fULL * static_cast<std::uint64_t>(cluster + 1)));
    return static_cast<std::int64_t>(h % static_cast<std::uint64_t>(spec_.cells())) + 1;
  }

  /// Secondary situational fields either echo the cell (correlated mode, the
  /// way temporal fields co-vary) or carry independent noise.
  std::int64_t derived_field(std::int64_t k, std::int64_t cell) {
    std::int64_t vocab = spec_.situ_vocab[static_cast<std::size_t>(k)] - 1;
    if (spec_.correlated_fields) return (cell - 1) % vocab + 1;
    return rng_.uniform_int(1, vocab);
  }

  std::int64_t item_in_cluster(std::int64_t g) {
    std::int64_t per = (spec_.num_items - 1 - g) / spec_.clusters + 1;
    std::int64_t j = rng_.uniform_int(0, per - 1);
    return 1 + g + spec_.clusters * j;
  }

  SynthSpec spec_;
  Rng rng_;
  double p_match_;
  double p_nomatch_;
};

/// Keeps at most `x` exposures immediately preceding each click and drops the
/// rest (exposures after the final click are dropped too). Behavior type is
/// read from situational field 0.
inline BehaviorSequence keep_exposures_filter(const BehaviorSequence& seq, std::int64_t x) {
  std::int64_t L = seq.length();
  std::vector<std::size_t> kept;
  std::vector<std::size_t> pending;
  for (std::int64_t i = 0; i < L; ++i) {
    auto ui = static_cast<std::size_t>(i);
    if (!seq.mask[ui]) continue;
    if (seq.situations[ui].ids.empty() || seq.situations[ui].ids[0] != kClickId) {
      pending.push_back(ui);
      continue;
    }
    std::size_t take_from = pending.size() > static_cast<std::size_t>(x)
                                ? pending.size() - static_cast<std::size_t>(x)
                                : 0;
    for (std::size_t p = take_from; p < pending.size(); ++p) kept.push_back(pending[p]);
    pending.clear();
    kept.push_back(ui);
  }
  BehaviorSequence out;
  out.item_ids.assign(static_cast<std::size_t>(L), 0);
  std::size_t fields = seq.situations.empty() ? 0 : seq.situations[0].ids.size();
  out.situations.assign(static_cast<std::size_t>(L),
                        Situation{std::vector<std::int64_t>(fields, 0)});
  out.mask.assign(static_cast<std::size_t>(L), 0);
  std::int64_t pad = L - static_cast<std::int64_t>(kept.size());
  for (std::size_t j = 0; j < kept.size(); ++j) {
    auto dst = static_cast<std::size_t>(pad) + j;
    out.item_ids[dst] = seq.item_ids[kept[j]];
    out.situations[dst] = seq.situations[kept[j]];
    out.mask[dst] = 1;
  }
  out.candidate_item = seq.candidate_item;
  out.candidate_situation = seq.candidate_situation;
  return out;
}

// ---------------------------------------------------------------------------
// JSON Lines external format
// ---------------------------------------------------------------------------

struct DataSchema {
  std::int64_t L = 30;
  std::int64_t item_vocab = 501;
  std::int64_t user_vocab = 201;
  std::vector<std::int64_t> situ_vocab = {3, 5, 7};

  std::int64_t fields() const { return static_cast<std::int64_t>(situ_vocab.size()); }
};

inline DataSchema schema_from(const ModelConfig& cfg) {
  return DataSchema{cfg.L, cfg.item_vocab, cfg.user_vocab, cfg.situ_vocab};
}

inline nlohmann::json situation_to_json(const Situation& s) {
  return nlohmann::json{{"ids", s.ids}};
}

inline nlohmann::json record_to_json(const TrainRecord& rec) {
  nlohmann::json hist = nlohmann::json::array();
  const auto& seq = rec.sequence;
  for (std::int64_t i = 0; i < seq.length(); ++i) {
    auto ui = static_cast<std::size_t>(i);
    if (!seq.mask[ui]) continue;
    hist.push_back({{"item", seq.item_ids[ui]}, {"situation", situation_to_json(seq.situations[ui])}});
  }
  return nlohmann::json{
      {"user", rec.user_id},
      {"candidate",
       {{"item", seq.candidate_item}, {"situation", situation_to_json(seq.candidate_situation)}}},
      {"history", hist},
      {"label", rec.label}};
}

inline void write_jsonl(std::ostream& os, const std::vector<TrainRecord>& records) {
  for (const auto& rec : records) os << record_to_json(rec).dump() << '\n';
}

inline void write_jsonl(const std::string& path, const std::vector<TrainRecord>& records) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_jsonl: cannot open " + path);
  write_jsonl(os, records);
}

namespace detail {

/// Hour-of-day, meal period and weekday/weekend ids from a UTC timestamp.
inline std::vector<std::int64_t> decompose_timestamp(std::int64_t btype, std::int64_t ts) {
  require(ts >= 0, "ingest: negative timestamp");
  std::int64_t hour = (ts / 3600) % 24;
  std::int64_t period;
  if (hour >= 5 && hour < 10) period = 1;        // breakfast
  else if (hour >= 10 && hour < 15) period = 2;  // lunch
  else if (hour >= 15 && hour < 21) period = 3;  // dinner
  else period = 4;
  std::int64_t days = ts / 86400;
  std::int64_t dow = (days + 4) % 7;  // epoch day is a Thursday
  std::int64_t weekend = (dow == 0 || dow == 6) ? 2 : 1;
  return {btype, hour + 1, period, weekend};
}

inline Situation parse_situation(const nlohmann::json& j, const DataSchema& schema) {
  Situation s;
  if (j.contains("ids")) {
    s.ids = j.at("ids").get<std::vector<std::int64_t>>();
  } else if (j.contains("ts")) {
    require(schema.fields() == 4,
            "ingest: timestamp situations decompose into 4 fields but schema has " +
                std::to_string(schema.fields()));
    std::int64_t btype = j.value("btype", kClickId);
    s.ids = decompose_timestamp(btype, j.at("ts").get<std::int64_t>());
  } else {
    fail("ingest: situation needs either \"ids\" or \"ts\"");
  }
  require(static_cast<std::int64_t>(s.ids.size()) == schema.fields(),
          "ingest: situation has " + std::to_string(s.ids.size()) + " ids, schema expects " +
              std::to_string(schema.fields()));
  for (std::size_t k = 0; k < s.ids.size(); ++k)
    require(s.ids[k] >= 1 && s.ids[k] < schema.situ_vocab[k],
            "ingest: situational field " + std::to_string(k) + " id " + std::to_string(s.ids[k]) +
                " outside [1, " + std::to_string(schema.situ_vocab[k]) + ")");
  return s;
}

inline TrainRecord parse_record(const nlohmann::json& j, const DataSchema& schema) {
  TrainRecord rec;
  rec.user_id = j.at("user").get<std::int64_t>();
  require(rec.user_id >= 1 && rec.user_id < schema.user_vocab,
          "ingest: user id " + std::to_string(rec.user_id) + " outside [1, " +
              std::to_string(schema.user_vocab) + ")");
  int label = j.at("label").get<int>();
  require(label == 0 || label == 1, "ingest: label must be 0 or 1");
  rec.label = label;

  const auto& cand = j.at("candidate");
  std::int64_t cand_item = cand.at("item").get<std::int64_t>();
  require(cand_item >= 1 && cand_item < schema.item_vocab,
          "ingest: candidate item id " + std::to_string(cand_item) + " outside [1, " +
              std::to_string(schema.item_vocab) + ")");

  const auto& hist = j.at("history");
  require(hist.is_array(), "ingest: history must be an array");
  std::int64_t total = static_cast<std::int64_t>(hist.size());
  std::int64_t keep = std::min(total, schema.L);
  std::int64_t pad = schema.L - keep;

  BehaviorSequence& seq = rec.sequence;
  seq.item_ids.assign(static_cast<std::size_t>(schema.L), 0);
  seq.situations.assign(static_cast<std::size_t>(schema.L),
                        Situation{std::vector<std::int64_t>(
                            static_cast<std::size_t>(schema.fields()), 0)});
  seq.mask.assign(static_cast<std::size_t>(schema.L), 0);
  for (std::int64_t i = 0; i < keep; ++i) {
    // histories longer than L keep the most recent L entries
    const auto& entry = hist[static_cast<std::size_t>(total - keep + i)];
    std::int64_t item = entry.at("item").get<std::int64_t>();
    require(item >= 1 && item < schema.item_vocab,
            "ingest: history item id " + std::to_string(item) + " outside [1, " +
                std::to_string(schema.item_vocab) + ")");
    auto dst = static_cast<std::size_t>(pad + i);
    seq.item_ids[dst] = item;
    seq.situations[dst] = parse_situation(entry.at("situation"), schema);
    seq.mask[dst] = 1;
  }
  seq.candidate_item = cand_item;
  seq.candidate_situation = parse_situation(cand.at("situation"), schema);
  return rec;
}

}  // namespace detail

struct IngestStats {
  std::int64_t records = 0;
  std::int64_t skipped = 0;
};

/// Parses one record per line. In strict mode a malformed line aborts with
/// its line number; otherwise it is counted and skipped.
inline IngestStats ingest_jsonl(const std::string& path, const DataSchema& schema, bool strict,
                                const std::function<void(TrainRecord&&)>& sink) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("ingest: cannot open " + path);
  IngestStats stats;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      sink(detail::parse_record(j, schema));
      ++stats.records;
    } catch (const std::exception& e) {
      if (strict)
        throw std::runtime_error("ingest: line " + std::to_string(lineno) + ": " + e.what());
      ++stats.skipped;
    }
  }
  return stats;
}

inline std::vector<TrainRecord> read_jsonl(const std::string& path, const DataSchema& schema,
                                           bool strict, IngestStats* stats_out = nullptr) {
  std::vector<TrainRecord> out;
  IngestStats stats =
      ingest_jsonl(path, schema, strict, [&](TrainRecord&& r) { out.push_back(std::move(r)); });
  if (stats_out) *stats_out = stats;
  return out;
}

/// synth.* key=value settings (CLI/config-file surface). Structural fields
/// (sequence length, vocabularies) always follow the model configuration;
/// only the behavioral knobs are settable here.
inline bool apply_synth_kv(SynthSpec& spec, const std::string& key, const std::string& value) {
  if (key == "synth.len_min") spec.len_min = std::stoll(value);
  else if (key == "synth.len_max") spec.len_max = std::stoll(value);
  else if (key == "synth.noise_rate") spec.noise_rate = std::stod(value);
  else if (key == "synth.signal_strength") spec.signal_strength = std::stod(value);
  else if (key == "synth.pos_rate") spec.pos_rate = std::stod(value);
  else if (key == "synth.clusters") spec.clusters = std::stoll(value);
  else if (key == "synth.correlated_fields")
    spec.correlated_fields = detail::parse_bool(value, key);
  else if (key == "synth.seed") spec.seed = static_cast<std::uint64_t>(std::stoull(value));
  else return false;
  return true;
}

}  // namespace dsain
