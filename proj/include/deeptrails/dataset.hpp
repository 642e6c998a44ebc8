#pragma once

// Vocabulary, token walks, feature schemas, event-log sessionization and the
// line-delimited dataset file format.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "deeptrails/behavior.hpp"
#include "deeptrails/errors.hpp"

namespace deeptrails {

using Json = nlohmann::json;

struct Vocabulary {
  int n_states = 0;

  int bos() const { return n_states; }
  int eos() const { return n_states + 1; }
  int size() const { return n_states + 2; }
  bool is_state(int token) const { return token >= 0 && token < n_states; }

  bool operator==(const Vocabulary&) const = default;
};

inline Vocabulary build_vocabulary(int n_states) {
  if (n_states < 1) throw ConfigError("vocabulary needs at least one state");
  return Vocabulary{n_states};
}

/// [bos, s_1, ..., s_T, eos]
using TokenWalk = std::vector<int>;

inline TokenWalk encode_walk(const Vocabulary& vocab, const std::vector<int>& states) {
  TokenWalk tokens;
  tokens.reserve(states.size() + 2);
  tokens.push_back(vocab.bos());
  for (int s : states) {
    if (!vocab.is_state(s)) throw DomainError("state id " + std::to_string(s) + " outside vocabulary");
    tokens.push_back(s);
  }
  tokens.push_back(vocab.eos());
  return tokens;
}

inline std::vector<int> decode_walk(const Vocabulary& vocab, const TokenWalk& tokens) {
  if (tokens.size() < 2 || tokens.front() != vocab.bos() || tokens.back() != vocab.eos()) {
    throw FormatError("token walk must start with bos and end with eos");
  }
  std::vector<int> states(tokens.begin() + 1, tokens.end() - 1);
  for (int s : states) {
    if (!vocab.is_state(s)) throw FormatError("token " + std::to_string(s) + " inside a walk is not a state");
  }
  return states;
}

// ---------------------------------------------------------------------------
// Features

struct FeatureSpec {
  std::string name;
  bool categorical = true;
  std::vector<std::string> levels;  // categorical only
  double mean = 0.0;                // numerical normalization, fitted on the training split
  double stddev = 1.0;

  bool operator==(const FeatureSpec&) const = default;
};

struct FeatureSchema {
  std::vector<FeatureSpec> features;

  std::size_t size() const { return features.size(); }
  bool empty() const { return features.empty(); }

  /// Width of the one-hot/z-score encoding.
  std::size_t encoded_width() const {
    std::size_t w = 0;
    for (const auto& f : features) w += f.categorical ? f.levels.size() : 1;
    return w;
  }

  void validate() const {
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (features[i].name.empty()) throw ConfigError("feature names must be non-empty");
      if (features[i].categorical && features[i].levels.empty()) {
        throw ConfigError("categorical feature '" + features[i].name + "' has no levels");
      }
      for (std::size_t j = 0; j < i; ++j) {
        if (features[j].name == features[i].name) throw ConfigError("duplicate feature name " + features[i].name);
      }
    }
  }

  bool operator==(const FeatureSchema&) const = default;
};

/// One value per schema entry: the level index for categorical features,
/// the raw value for numerical ones.
using FeatureVector = std::vector<double>;

inline void check_conforms(const FeatureSchema& schema, const FeatureVector& values) {
  if (values.size() != schema.size()) throw DomainError("feature vector length does not match schema");
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto& f = schema.features[i];
    if (!std::isfinite(values[i])) throw DomainError("feature '" + f.name + "' is not finite");
    if (f.categorical) {
      const double v = values[i];
      if (v != std::floor(v) || v < 0 || v >= static_cast<double>(f.levels.size())) {
        throw DomainError("unknown level for categorical feature '" + f.name + "'");
      }
    }
  }
}

/// One-hot blocks for categorical features, z-scores for numerical ones.
inline std::vector<double> encode_feature_vector(const FeatureSchema& schema, const FeatureVector& values) {
  check_conforms(schema, values);
  std::vector<double> out;
  out.reserve(schema.encoded_width());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto& f = schema.features[i];
    if (f.categorical) {
      for (std::size_t l = 0; l < f.levels.size(); ++l) out.push_back(static_cast<double>(l) == values[i] ? 1.0 : 0.0);
    } else {
      out.push_back((values[i] - f.mean) / f.stddev);
    }
  }
  return out;
}

/// Freezes mean/stddev of numerical features from `training` vectors.
inline void fit_normalization(FeatureSchema& schema, const std::vector<FeatureVector>& training) {
  for (std::size_t i = 0; i < schema.size(); ++i) {
    auto& f = schema.features[i];
    if (f.categorical || training.empty()) continue;
    double sum = 0.0;
    for (const auto& v : training) sum += v.at(i);
    f.mean = sum / static_cast<double>(training.size());
    double sq = 0.0;
    for (const auto& v : training) sq += (v[i] - f.mean) * (v[i] - f.mean);
    const double sd = std::sqrt(sq / static_cast<double>(training.size()));
    f.stddev = sd > 0.0 ? sd : 1.0;
  }
}

/// Six binary features: a one-hot over {even, odd, first-even, first-odd}
/// followed by two noise bits.
inline FeatureSchema subtrails_schema() {
  FeatureSchema schema;
  for (const char* name : {"f1_even", "f2_odd", "f3_first_even", "f4_first_odd", "f5_noise", "f6_noise"}) {
    schema.features.push_back(FeatureSpec{name, true, {"0", "1"}, 0.0, 1.0});
  }
  return schema;
}

inline FeatureVector make_subtrails_features(BehaviorKind kind, int noise_a, int noise_b) {
  FeatureVector v(6, 0.0);
  switch (kind) {
    case BehaviorKind::Even: v[0] = 1; break;
    case BehaviorKind::Odd: v[1] = 1; break;
    case BehaviorKind::FirstEven: v[2] = 1; break;
    case BehaviorKind::FirstOdd: v[3] = 1; break;
    default: throw DomainError("subtrails features only cover even, odd, first-even and first-odd");
  }
  if ((noise_a != 0 && noise_a != 1) || (noise_b != 0 && noise_b != 1)) throw DomainError("noise bits must be 0 or 1");
  v[4] = noise_a;
  v[5] = noise_b;
  return v;
}

// ---------------------------------------------------------------------------
// Event logs

struct Event {
  std::string user;
  double timestamp = 0.0;  // seconds
  int state = 0;
};

using EventLog = std::vector<Event>;

/// Chains each user's time-sorted events while consecutive gaps stay within
/// `window_seconds`; sequences shorter than two states are dropped. Users are
/// processed in lexicographic order.
inline std::vector<std::vector<int>> sessionize(const EventLog& log, double window_seconds = 900.0) {
  std::map<std::string, std::vector<const Event*>> by_user;
  for (const auto& e : log) by_user[e.user].push_back(&e);
  std::vector<std::vector<int>> sessions;
  for (auto& [user, events] : by_user) {
    std::stable_sort(events.begin(), events.end(),
                     [](const Event* a, const Event* b) { return a->timestamp < b->timestamp; });
    std::vector<int> current;
    double last = 0.0;
    for (const Event* e : events) {
      if (!current.empty() && e->timestamp - last > window_seconds) {
        if (current.size() >= 2) sessions.push_back(std::move(current));
        current.clear();
      }
      current.push_back(e->state);
      last = e->timestamp;
    }
    if (current.size() >= 2) sessions.push_back(std::move(current));
  }
  return sessions;
}

/// Three columns (user, epoch seconds, state) separated by commas, tabs or spaces.
inline EventLog read_event_log(std::istream& in) {
  EventLog log;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::replace(line.begin(), line.end(), '\t', ' ');
    if (line.find_first_not_of(" \r") == std::string::npos || line[line.find_first_not_of(' ')] == '#') continue;
    std::istringstream row(line);
    Event e;
    if (!(row >> e.user >> e.timestamp >> e.state) || e.state < 0) {
      throw FormatError("event log: bad record on line " + std::to_string(line_no));
    }
    log.push_back(std::move(e));
  }
  return log;
}

// ---------------------------------------------------------------------------
// Datasets

struct SequenceRecord {
  TokenWalk tokens;
  std::optional<FeatureVector> features;
  std::string label;  // generating behavior, if known
};

struct SequenceDataset {
  Vocabulary vocab;
  FeatureSchema schema;
  std::vector<SequenceRecord> records;

  bool has_features() const { return !schema.empty(); }

  std::size_t longest_walk() const {
    std::size_t longest = 0;
    for (const auto& r : records) longest = std::max(longest, r.tokens.size());
    return longest;
  }

  void add(const std::vector<int>& states, std::optional<FeatureVector> features = std::nullopt,
           std::string label = {}) {
    if (features) check_conforms(schema, *features);
    records.push_back(SequenceRecord{encode_walk(vocab, states), std::move(features), std::move(label)});
  }

  void validate() const {
    schema.validate();
    for (const auto& r : records) {
      for (int t : r.tokens) {
        if (t < 0 || t >= vocab.size()) throw DataError("token outside vocabulary");
      }
      if (r.features) check_conforms(schema, *r.features);
      if (has_features() && !r.features) throw DataError("record without features in a featured dataset");
    }
  }
};

namespace detail {

inline Json schema_to_json(const FeatureSchema& schema) {
  Json arr = Json::array();
  for (const auto& f : schema.features) {
    Json j{{"name", f.name}, {"kind", f.categorical ? "categorical" : "numerical"}};
    if (f.categorical) {
      j["levels"] = f.levels;
    } else {
      j["mean"] = f.mean;
      j["std"] = f.stddev;
    }
    arr.push_back(std::move(j));
  }
  return arr;
}

inline FeatureSchema schema_from_json(const Json& arr) {
  FeatureSchema schema;
  for (const auto& j : arr) {
    FeatureSpec f;
    f.name = j.at("name").get<std::string>();
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "categorical") {
      f.categorical = true;
      f.levels = j.at("levels").get<std::vector<std::string>>();
    } else if (kind == "numerical") {
      f.categorical = false;
      f.mean = j.value("mean", 0.0);
      f.stddev = j.value("std", 1.0);
    } else {
      throw FormatError("unknown feature kind '" + kind + "'");
    }
    schema.features.push_back(std::move(f));
  }
  schema.validate();
  return schema;
}

}  // namespace detail

inline constexpr int kDatasetFormatVersion = 1;

inline void write_dataset(std::ostream& out, const SequenceDataset& data) {
  Json header{{"format", "deeptrails-dataset"},
              {"version", kDatasetFormatVersion},
              {"n_states", data.vocab.n_states},
              {"schema", detail::schema_to_json(data.schema)}};
  out << header.dump() << '\n';
  for (const auto& r : data.records) {
    Json rec{{"walk", decode_walk(data.vocab, r.tokens)}};
    if (r.features) {
      Json feats = Json::object();
      for (std::size_t i = 0; i < data.schema.size(); ++i) {
        const auto& f = data.schema.features[i];
        if (f.categorical) {
          feats[f.name] = f.levels[static_cast<std::size_t>((*r.features)[i])];
        } else {
          feats[f.name] = (*r.features)[i];
        }
      }
      rec["features"] = std::move(feats);
    }
    if (!r.label.empty()) rec["label"] = r.label;
    out << rec.dump() << '\n';
  }
}

inline SequenceDataset read_dataset(std::istream& in) {
  SequenceDataset data;
  std::string line;
  std::size_t line_no = 1;
  auto fail = [&](const std::string& why) {
    throw FormatError("dataset line " + std::to_string(line_no) + ": " + why);
  };
  if (!std::getline(in, line)) fail("missing header");
  try {
    const auto header = Json::parse(line);
    if (header.value("format", "") != "deeptrails-dataset") fail("not a dataset header");
    if (header.value("version", 0) != kDatasetFormatVersion) fail("unsupported dataset version");
    data.vocab = build_vocabulary(header.at("n_states").get<int>());
    data.schema = detail::schema_from_json(header.at("schema"));
  } catch (const Json::exception& e) {
    fail(e.what());
  } catch (const ConfigError& e) {
    fail(e.what());
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto rec = Json::parse(line);
      SequenceRecord r;
      r.tokens = encode_walk(data.vocab, rec.at("walk").get<std::vector<int>>());
      if (rec.contains("features")) {
        const auto& feats = rec["features"];
        FeatureVector v;
        for (const auto& f : data.schema.features) {
          const auto& x = feats.at(f.name);
          if (f.categorical) {
            const auto level = x.get<std::string>();
            const auto it = std::find(f.levels.begin(), f.levels.end(), level);
            if (it == f.levels.end()) fail("unknown level '" + level + "' for feature " + f.name);
            v.push_back(static_cast<double>(it - f.levels.begin()));
          } else {
            v.push_back(x.get<double>());
          }
        }
        r.features = std::move(v);
      } else if (data.has_features()) {
        fail("record lacks features");
      }
      r.label = rec.value("label", "");
      data.records.push_back(std::move(r));
    } catch (const Json::exception& e) {
      fail(e.what());
    } catch (const DomainError& e) {
      fail(e.what());
    }
  }
  return data;
}

inline void save_dataset(const std::string& path, const SequenceDataset& data) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_dataset(out, data);
}

inline SequenceDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open dataset " + path);
  return read_dataset(in);
}

/// Plain (feature-less) dataset from state sequences.
inline SequenceDataset make_dataset(int n_states, const std::vector<std::vector<int>>& walks,
                                    const std::string& label = {}) {
  SequenceDataset data{build_vocabulary(n_states), {}, {}};
  data.records.reserve(walks.size());
  for (const auto& w : walks) data.add(w, std::nullopt, label);
  return data;
}

}  // namespace deeptrails
