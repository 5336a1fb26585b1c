#pragma once

// CTR datasets: Criteo-format TSV ingestion, a planted-teacher synthetic
// generator, deterministic splits, minibatches and a binary columnar cache.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nasforge/hashing.hpp"
#include "nasforge/rng.hpp"
#include "nasforge/tensor.hpp"

namespace nasforge {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kDefaultEmbeddingCap = 500000;

struct FeatureSpec {
  std::size_t num_dense = 0;
  std::vector<std::size_t> vocab;  // per sparse feature, after capping

  std::size_t num_sparse() const { return vocab.size(); }
  std::size_t total_vocab() const { return std::accumulate(vocab.begin(), vocab.end(), std::size_t{0}); }
  bool operator==(const FeatureSpec&) const = default;
};

/// Row-major storage; sparse ids are per-feature in [0, vocab[f]), 0 meaning missing.
struct Dataset {
  FeatureSpec spec;
  std::vector<double> labels;
  std::vector<double> dense;
  std::vector<std::int64_t> ids;

  std::size_t rows() const { return labels.size(); }
};

struct FeatureBatch {
  Tensor dense;        // [B x num_dense]
  ops::IdMatrix ids;   // [B x num_sparse], per-feature ids
  std::vector<double> labels;

  std::size_t size() const { return labels.size(); }
};

inline FeatureBatch make_batch(const Dataset& ds, const std::vector<std::size_t>& rows) {
  const std::size_t d = ds.spec.num_dense, f = ds.spec.num_sparse();
  FeatureBatch b;
  std::vector<double> dense(rows.size() * d);
  b.ids = ops::IdMatrix{rows.size(), f, std::vector<std::int64_t>(rows.size() * f)};
  b.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    if (r >= ds.rows()) throw DataError("batch row " + std::to_string(r) + " out of range");
    std::copy_n(ds.dense.begin() + long(r * d), d, dense.begin() + long(i * d));
    std::copy_n(ds.ids.begin() + long(r * f), f, b.ids.values.begin() + long(i * f));
    b.labels[i] = ds.labels[r];
  }
  b.dense = Tensor({rows.size(), d}, std::move(dense));
  return b;
}

inline FeatureBatch make_batch(const Dataset& ds, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> rows(end - begin);
  std::iota(rows.begin(), rows.end(), begin);
  return make_batch(ds, rows);
}

inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& rows) {
  const FeatureBatch b = make_batch(ds, rows);
  return Dataset{ds.spec, b.labels, b.dense.values(), b.ids.values};
}

/// Token to id in [1, vocab); id 0 is reserved for missing values.
inline std::int64_t hash_token(std::string_view token, std::size_t vocab) {
  if (token.empty() || vocab < 2) return 0;
  return std::int64_t(1 + fnv1a64(token) % (vocab - 1));
}

inline double transform_dense(double raw) { return std::log1p(std::max(raw, 0.0)); }

struct TsvOptions {
  std::size_t num_dense = 13;
  std::size_t num_sparse = 26;
  std::size_t vocab = kDefaultEmbeddingCap;  // per feature, before capping
  std::size_t embedding_cap = kDefaultEmbeddingCap;
};

/// Rows are `label \t dense... \t sparse...`; empty fields are missing.
inline Dataset parse_criteo_tsv(std::istream& in, const TsvOptions& opt) {
  Dataset ds;
  ds.spec.num_dense = opt.num_dense;
  ds.spec.vocab.assign(opt.num_sparse, std::min(opt.vocab, opt.embedding_cap));
  const std::size_t expected = 1 + opt.num_dense + opt.num_sparse;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> fields;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    fields.clear();
    std::size_t start = 0;
    for (;;) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (fields.size() != expected)
      throw DataError(where + "expected " + std::to_string(expected) + " columns, got " + std::to_string(fields.size()));
    if (fields[0] != "0" && fields[0] != "1") throw DataError(where + "label must be 0 or 1, got '" + fields[0] + "'");
    ds.labels.push_back(fields[0] == "1" ? 1.0 : 0.0);
    for (std::size_t j = 0; j < opt.num_dense; ++j) {
      const std::string& f = fields[1 + j];
      if (f.empty()) {
        ds.dense.push_back(0.0);
        continue;
      }
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(f, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != f.size()) throw DataError(where + "dense column " + std::to_string(j + 1) + " is not numeric: '" + f + "'");
      ds.dense.push_back(transform_dense(v));
    }
    for (std::size_t j = 0; j < opt.num_sparse; ++j)
      ds.ids.push_back(hash_token(fields[1 + opt.num_dense + j], ds.spec.vocab[j]));
  }
  return ds;
}

inline Dataset load_criteo_tsv(const std::string& path, const TsvOptions& opt) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return parse_criteo_tsv(in, opt);
}

struct SynthSpec {
  std::size_t num_dense = 13;
  std::size_t num_sparse = 26;
  std::size_t vocab = 200;  // per feature, including the reserved id 0
  std::size_t rows = 100000;
  std::uint64_t seed = 0;
  double teacher_scale = 1.0;
  std::size_t teacher_rank = 4;
};

/// Planted teacher: logit = scale * (sum of per-id biases + dense linear term
/// + second-order FM over per-id factors); labels ~ Bernoulli(sigmoid(logit)).
/// Term variances are set so the logit standard deviation is about 2 at
/// scale 1, which makes the labels well above chance to predict.
inline Dataset synth_generate(const SynthSpec& s) {
  if (s.rows == 0) throw DataError("synth_generate: rows must be positive");
  if (s.vocab < 2) throw DataError("synth_generate: vocab must be at least 2");
  Rng teacher_rng(derive_seed(s.seed, 0));
  const std::size_t f = s.num_sparse, d = s.num_dense, k = s.teacher_rank;
  const double bias_sd = f ? std::sqrt(2.5 / double(f)) : 0.0;
  const double pairs = double(f * (f > 0 ? f - 1 : 0)) / 2.0;
  const double factor_sd = pairs > 0 ? std::pow(1.0 / (pairs * double(k)), 0.25) : 0.0;
  const double dense_sd = d ? std::sqrt(1.5 / double(d)) : 0.0;
  std::vector<double> bias(f * s.vocab), factors(f * s.vocab * k), dense_w(d);
  for (auto& b : bias) b = bias_sd * teacher_rng.normal();
  for (auto& v : factors) v = factor_sd * teacher_rng.normal();
  for (auto& w : dense_w) w = dense_sd * teacher_rng.normal();

  Dataset ds;
  ds.spec.num_dense = d;
  ds.spec.vocab.assign(f, s.vocab);
  ds.labels.resize(s.rows);
  ds.dense.resize(s.rows * d);
  ds.ids.resize(s.rows * f);
  Rng rng(derive_seed(s.seed, 1));
  std::vector<double> sum(k), sq(k);
  for (std::size_t r = 0; r < s.rows; ++r) {
    double logit = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double raw = std::floor(std::exp(1.0 + rng.normal())) - 1.0;
      const double x = transform_dense(raw);
      ds.dense[r * d + j] = x;
      logit += dense_w[j] * (x - 1.0);
    }
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(sq.begin(), sq.end(), 0.0);
    for (std::size_t j = 0; j < f; ++j) {
      const auto id = std::int64_t(1 + rng.uniform_int(s.vocab - 1));
      ds.ids[r * f + j] = id;
      const std::size_t row = j * s.vocab + std::size_t(id);
      logit += bias[row];
      for (std::size_t c = 0; c < k; ++c) {
        const double v = factors[row * k + c];
        sum[c] += v;
        sq[c] += v * v;
      }
    }
    for (std::size_t c = 0; c < k; ++c) logit += 0.5 * (sum[c] * sum[c] - sq[c]);
    ds.labels[r] = rng.bernoulli(ops::sigmoid_scalar(s.teacher_scale * logit)) ? 1.0 : 0.0;
  }
  return ds;
}

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Disjoint 80/10/10 split of a seeded permutation.
inline Split split_indices(std::size_t rows, std::uint64_t seed, double train_frac = 0.8, double val_frac = 0.1) {
  std::vector<std::size_t> perm(rows);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, 0x5917));
  rng.shuffle(perm);
  const auto n_train = std::size_t(std::llround(train_frac * double(rows)));
  const auto n_val = std::min(rows - n_train, std::size_t(std::llround(val_frac * double(rows))));
  Split s;
  s.train.assign(perm.begin(), perm.begin() + long(n_train));
  s.val.assign(perm.begin() + long(n_train), perm.begin() + long(n_train + n_val));
  s.test.assign(perm.begin() + long(n_train + n_val), perm.end());
  return s;
}

namespace detail {
inline constexpr char kCacheMagic[8] = {'N', 'F', 'D', 'S', 'E', 'T', '0', '1'};

template <class T>
void put(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw DataError("dataset cache truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}
}  // namespace detail

/// Binary columnar layout (little-endian): magic, rows, #dense, #sparse,
/// vocab[#sparse], labels as u8, dense columns as f64, sparse columns as i64.
inline std::string encode_dataset(const Dataset& ds) {
  static_assert(std::endian::native == std::endian::little, "cache format is little-endian");
  const std::size_t n = ds.rows(), d = ds.spec.num_dense, f = ds.spec.num_sparse();
  std::string out(detail::kCacheMagic, sizeof(detail::kCacheMagic));
  detail::put<std::uint64_t>(out, n);
  detail::put<std::uint64_t>(out, d);
  detail::put<std::uint64_t>(out, f);
  for (auto v : ds.spec.vocab) detail::put<std::uint64_t>(out, v);
  for (double y : ds.labels) detail::put<std::uint8_t>(out, y > 0.5 ? 1 : 0);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t r = 0; r < n; ++r) detail::put<double>(out, ds.dense[r * d + j]);
  for (std::size_t j = 0; j < f; ++j)
    for (std::size_t r = 0; r < n; ++r) detail::put<std::int64_t>(out, ds.ids[r * f + j]);
  return out;
}

inline Dataset decode_dataset(const std::string& bytes) {
  if (bytes.size() < sizeof(detail::kCacheMagic) ||
      std::memcmp(bytes.data(), detail::kCacheMagic, sizeof(detail::kCacheMagic)) != 0)
    throw DataError("not a dataset cache file");
  std::size_t pos = sizeof(detail::kCacheMagic);
  Dataset ds;
  const auto n = detail::get<std::uint64_t>(bytes, pos);
  ds.spec.num_dense = detail::get<std::uint64_t>(bytes, pos);
  const auto f = detail::get<std::uint64_t>(bytes, pos);
  const std::size_t d = ds.spec.num_dense;
  const std::size_t expected = pos + 8 * f + n + 8 * n * (d + f);
  if (bytes.size() != expected) throw DataError("dataset cache has wrong size");
  for (std::uint64_t j = 0; j < f; ++j) ds.spec.vocab.push_back(detail::get<std::uint64_t>(bytes, pos));
  ds.labels.resize(n);
  for (auto& y : ds.labels) y = detail::get<std::uint8_t>(bytes, pos);
  ds.dense.resize(n * d);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t r = 0; r < n; ++r) ds.dense[r * d + j] = detail::get<double>(bytes, pos);
  ds.ids.resize(n * f);
  for (std::size_t j = 0; j < f; ++j)
    for (std::size_t r = 0; r < n; ++r) {
      const auto id = detail::get<std::int64_t>(bytes, pos);
      if (id < 0 || std::uint64_t(id) >= ds.spec.vocab[j]) throw DataError("dataset cache id out of range");
      ds.ids[r * f + j] = id;
    }
  return ds;
}

inline std::string dataset_checksum(const Dataset& ds) { return sha256_hex(encode_dataset(ds)); }

inline void write_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  const std::string bytes = encode_dataset(ds);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw DataError("cannot write " + path);
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_dataset(ss.str());
}

}  // namespace nasforge
