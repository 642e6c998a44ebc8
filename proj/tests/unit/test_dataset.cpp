#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "deeptrails/behavior.hpp"
#include "deeptrails/dataset.hpp"
#include "deeptrails/rng.hpp"

using namespace deeptrails;

TEST(Vocabulary, Sizes) {
  EXPECT_EQ(build_vocabulary(100).size(), 102);
  EXPECT_EQ(build_vocabulary(33).size(), 35);
  EXPECT_EQ(build_vocabulary(1).size(), 3);
  const auto v = build_vocabulary(10);
  EXPECT_EQ(v.bos(), 10);
  EXPECT_EQ(v.eos(), 11);
  EXPECT_THROW(build_vocabulary(0), ConfigError);
}

TEST(Encoding, Example) {
  const auto v = build_vocabulary(10);
  EXPECT_EQ(encode_walk(v, {4, 7}), (TokenWalk{10, 4, 7, 11}));
  EXPECT_THROW(encode_walk(v, {4, 10}), DomainError);
  EXPECT_THROW(encode_walk(v, {-1}), DomainError);
  EXPECT_THROW(decode_walk(v, {10, 12, 11}), FormatError);
  EXPECT_THROW(decode_walk(v, {4, 7, 11}), FormatError);
  EXPECT_THROW(decode_walk(v, {10, 4, 7}), FormatError);
}

TEST(Encoding, RoundTripRandomWalks) {
  const auto v = build_vocabulary(50);
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    std::vector<int> w(1 + rng.below(30));
    for (int& s : w) s = static_cast<int>(rng.below(50));
    EXPECT_EQ(decode_walk(v, encode_walk(v, w)), w);
  }
}

namespace {

EventLog events(const std::vector<std::tuple<std::string, double, int>>& rows) {
  EventLog log;
  for (const auto& [u, t, s] : rows) log.push_back(Event{u, t, s});
  return log;
}

// Pairwise oracle: two events of a user share a session iff every gap between
// the time-ordered events from one to the other stays within the window.
std::vector<std::vector<int>> naive_sessions(const EventLog& log, double window) {
  std::set<std::string> users;
  for (const auto& e : log) users.insert(e.user);
  std::vector<std::vector<int>> out;
  for (const auto& u : users) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < log.size(); ++i)
      if (log[i].user == u) idx.push_back(i);
    // stable insertion sort by timestamp
    for (std::size_t i = 1; i < idx.size(); ++i)
      for (std::size_t j = i; j > 0 && log[idx[j]].timestamp < log[idx[j - 1]].timestamp; --j) std::swap(idx[j], idx[j - 1]);
    const std::size_t n = idx.size();
    std::vector<int> group(n, -1);
    int next = 0;
    for (std::size_t a = 0; a < n; ++a) {
      if (group[a] >= 0) continue;
      group[a] = next;
      for (std::size_t b = a + 1; b < n; ++b) {
        bool linked = true;
        for (std::size_t k = a; k < b; ++k) {
          if (log[idx[k + 1]].timestamp - log[idx[k]].timestamp > window) linked = false;
        }
        if (linked) group[b] = next;
      }
      ++next;
    }
    for (int g = 0; g < next; ++g) {
      std::vector<int> seq;
      for (std::size_t a = 0; a < n; ++a)
        if (group[a] == g) seq.push_back(log[idx[a]].state);
      if (seq.size() >= 2) out.push_back(seq);
    }
  }
  return out;
}

}  // namespace

TEST(Sessionize, Examples) {
  EXPECT_EQ(sessionize(events({{"u", 0, 1}, {"u", 600, 2}, {"u", 1440, 3}})), (std::vector<std::vector<int>>{{1, 2, 3}}));
  EXPECT_TRUE(sessionize(events({{"u", 0, 1}, {"u", 3600, 2}})).empty());
  // Out-of-order input, gap exactly at the window edge stays chained.
  EXPECT_EQ(sessionize(events({{"u", 900, 2}, {"u", 0, 1}})), (std::vector<std::vector<int>>{{1, 2}}));
  // Never merges users.
  EXPECT_TRUE(sessionize(events({{"a", 0, 1}, {"b", 10, 2}})).empty());
}

TEST(Sessionize, MatchesPairwiseOracle) {
  Rng rng(11);
  EventLog log;
  for (int i = 0; i < 10000; ++i) {
    log.push_back(Event{"user" + std::to_string(rng.below(40)), std::floor(rng.uniform() * 2.0e6), static_cast<int>(rng.below(33))});
  }
  const auto got = sessionize(log, 900.0);
  EXPECT_EQ(got, naive_sessions(log, 900.0));
  EXPECT_FALSE(got.empty());
}

TEST(Sessionize, ReadsEventLog) {
  std::istringstream in("# user,time,state\nu1,0,3\nu1\t60\t4\nu2 5 1\n");
  const auto log = read_event_log(in);
  ASSERT_EQ(log.size(), 3u);
  EXPECT_EQ(log[1].state, 4);
  std::istringstream bad("u1,0,3\nu1,x,4\n");
  try {
    read_event_log(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Features, OneHotAndZScore) {
  FeatureSchema day;
  day.features.push_back({"day", true, {"mon", "tue", "wed", "thu", "fri", "sat", "sun"}});
  EXPECT_EQ(encode_feature_vector(day, {0}), (std::vector<double>{1, 0, 0, 0, 0, 0, 0}));
  EXPECT_THROW(encode_feature_vector(day, {7}), DomainError);
  EXPECT_THROW(encode_feature_vector(day, {1.5}), DomainError);

  FeatureSchema mixed = day;
  mixed.features.push_back({"age", false, {}});
  mixed.features.push_back({"device", true, {"a", "b"}});
  fit_normalization(mixed, {{0, 20, 0}, {1, 40, 1}, {2, 30, 0}});
  EXPECT_DOUBLE_EQ(mixed.features[1].mean, 30.0);
  const auto enc = encode_feature_vector(mixed, {3, 30, 1});
  EXPECT_EQ(enc.size(), 7u + 1u + 2u);
  EXPECT_EQ(enc.size(), mixed.encoded_width());
  EXPECT_DOUBLE_EQ(enc[7], 0.0);
  EXPECT_DOUBLE_EQ(enc[9], 1.0);
}

TEST(Features, SchemaValidation) {
  FeatureSchema s;
  s.features.push_back({"a", true, {}});
  EXPECT_THROW(s.validate(), ConfigError);
  s.features[0].levels = {"x"};
  s.features.push_back({"a", false, {}});
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Features, SubTrailsVectors) {
  EXPECT_EQ(make_subtrails_features(BehaviorKind::Even, 0, 1), (FeatureVector{1, 0, 0, 0, 0, 1}));
  EXPECT_EQ(make_subtrails_features(BehaviorKind::FirstOdd, 0, 0), (FeatureVector{0, 0, 0, 1, 0, 0}));
  std::set<FeatureVector> all;
  for (auto k : {BehaviorKind::Even, BehaviorKind::Odd, BehaviorKind::FirstEven, BehaviorKind::FirstOdd})
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) all.insert(make_subtrails_features(k, a, b));
  EXPECT_EQ(all.size(), 16u);
  EXPECT_THROW(make_subtrails_features(BehaviorKind::Random, 0, 0), DomainError);
  EXPECT_THROW(make_subtrails_features(BehaviorKind::Even, 2, 0), DomainError);
  EXPECT_EQ(subtrails_schema().encoded_width(), 12u);
}

namespace {

SequenceDataset subtrails_like(std::uint64_t seed) {
  const auto g = generate_ba_graph({30, 3, seed});
  SequenceDataset data{build_vocabulary(30), subtrails_schema(), {}};
  Rng rng(seed);
  for (auto k : {BehaviorKind::Even, BehaviorKind::Odd, BehaviorKind::FirstEven, BehaviorKind::FirstOdd}) {
    const auto set = sample_walk_set(g, {k, 1.0}, 2, 20, rng.next_u64());
    for (const auto& w : set.walks) {
      data.add(w, make_subtrails_features(k, static_cast<int>(rng.below(2)), static_cast<int>(rng.below(2))),
               std::string(to_string(k)));
    }
  }
  return data;
}

void expect_same(const SequenceDataset& a, const SequenceDataset& b) {
  EXPECT_EQ(a.vocab, b.vocab);
  EXPECT_EQ(a.schema, b.schema);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].tokens, b.records[i].tokens);
    EXPECT_EQ(a.records[i].features, b.records[i].features);
    EXPECT_EQ(a.records[i].label, b.records[i].label);
  }
}

}  // namespace

TEST(Persistence, RoundTripSubTrails) {
  const auto data = subtrails_like(5);
  std::stringstream buf;
  write_dataset(buf, data);
  expect_same(read_dataset(buf), data);

  const auto path = std::filesystem::temp_directory_path() / "deeptrails_test_dataset.jsonl";
  save_dataset(path.string(), data);
  expect_same(load_dataset(path.string()), data);
  std::filesystem::remove(path);
}

TEST(Persistence, NumericalFeatures) {
  SequenceDataset data{build_vocabulary(4), {}, {}};
  data.schema.features.push_back({"age", false, {}, 31.5, 4.25});
  data.add({0, 1}, FeatureVector{0.1});
  std::stringstream buf;
  write_dataset(buf, data);
  expect_same(read_dataset(buf), data);
}

TEST(Persistence, CorruptedLineNamed) {
  const auto data = make_dataset(10, {{1, 2}, {2, 3}, {3, 4}, {4, 5}, {5, 6}, {6, 7}});
  std::stringstream buf;
  write_dataset(buf, data);
  std::vector<std::string> lines;
  for (std::string l; std::getline(buf, l);) lines.push_back(l);
  lines[4] = "{\"walk\": [1, 2";
  std::stringstream broken;
  for (const auto& l : lines) broken << l << '\n';
  try {
    read_dataset(broken);
    FAIL() << "corrupted line accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 5"), std::string::npos) << e.what();
  }
}

TEST(Persistence, BadRecordsRejected) {
  auto load = [](const std::string& text) {
    std::istringstream in(text);
    return read_dataset(in);
  };
  const std::string header = R"({"format":"deeptrails-dataset","version":1,"n_states":5,"schema":[]})";
  EXPECT_THROW(load(header + "\n{\"walk\":[1,9]}\n"), FormatError);
  EXPECT_THROW(load(R"({"format":"other","version":1,"n_states":5,"schema":[]})"), FormatError);
  EXPECT_THROW(load(R"({"format":"deeptrails-dataset","version":99,"n_states":5,"schema":[]})"), FormatError);
  EXPECT_THROW(load(""), FormatError);
}

TEST(Persistence, EmptyDataset) {
  const SequenceDataset empty{build_vocabulary(7), {}, {}};
  std::stringstream buf;
  write_dataset(buf, empty);
  int lines = 0;
  for (std::string l; std::getline(buf, l);) ++lines;
  EXPECT_EQ(lines, 1);
  buf.clear();
  buf.seekg(0);
  const auto back = read_dataset(buf);
  EXPECT_TRUE(back.records.empty());
  EXPECT_EQ(back.vocab.n_states, 7);
}

TEST(Dataset, Validation) {
  auto data = subtrails_like(9);
  EXPECT_NO_THROW(data.validate());
  EXPECT_EQ(data.longest_walk(), 22u);
  data.records.push_back(SequenceRecord{encode_walk(data.vocab, {1, 2}), std::nullopt, {}});
  EXPECT_THROW(data.validate(), DataError);
}
