#pragma once

// Multi-subject timeseries container and its two on-disk forms:
//
// Packed binary (little-endian):
//   "SMDS" | u16 version=1 | u32 N | u32 M
//   per subject: u32 id_len | id bytes (UTF-8) | i32 group (−1 = none)
//                | u32 T | T·N f64 row-major | u8 has_labels | [T × i32]
//
// CSV manifest: a JSON file
//   {"n_features": N,
//    "subjects": [{"subject_id": "...", "csv_path": "...",
//                  "group": 0 | null, "label_path": "..." | null}, ...]}
// where csv_path holds T rows of N comma-separated values and label_path one
// integer per line. Relative paths resolve against the manifest's directory.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "subjmap/errors.hpp"
#include "subjmap/layers.hpp"
#include "subjmap/linalg.hpp"

namespace subjmap {

struct SubjectRecord {
  std::string subject_id;
  Matrix x;                                   // T × N
  std::optional<std::vector<int>> labels;     // per timestep
  std::optional<int> group;

  std::size_t timesteps() const { return x.rows(); }
  bool operator==(const SubjectRecord&) const = default;
};

struct DatasetMetadata {
  std::string generator;
  std::uint64_t seed = 0;
};

struct MultiSubjectDataset {
  std::size_t n_features = 0;
  std::vector<SubjectRecord> subjects;
  DatasetMetadata metadata;

  std::size_t size() const { return subjects.size(); }

  std::size_t total_timesteps() const {
    std::size_t t = 0;
    for (const auto& s : subjects) t += s.timesteps();
    return t;
  }

  bool has_labels() const {
    return !subjects.empty() &&
           std::all_of(subjects.begin(), subjects.end(), [](const auto& s) { return s.labels.has_value(); });
  }

  bool has_groups() const {
    return !subjects.empty() &&
           std::all_of(subjects.begin(), subjects.end(), [](const auto& s) { return s.group.has_value(); });
  }

  /// Same N everywhere, label vectors as long as the timeseries.
  void validate() const {
    for (const auto& s : subjects) {
      if (s.x.cols() != n_features)
        throw ShapeMismatch("subject '" + s.subject_id + "' has " + std::to_string(s.x.cols()) +
                            " features, expected " + std::to_string(n_features));
      if (s.labels && s.labels->size() != s.x.rows())
        throw ShapeMismatch("subject '" + s.subject_id + "' has " +
                            std::to_string(s.labels->size()) + " labels for " +
                            std::to_string(s.x.rows()) + " timesteps");
      if (!s.x.all_finite())
        throw ShapeMismatch("subject '" + s.subject_id + "' has non-finite values");
    }
  }

  /// Subjects and values only; metadata is not part of equality.
  bool same_content(const MultiSubjectDataset& o) const {
    return n_features == o.n_features && subjects == o.subjects;
  }
};

/// Flattened (subject, timestep) view: rows stacked subject by subject, with
/// the subject index of each row. Subject index = position in the dataset
/// plus `subject_offset`.
struct StackedRows {
  Matrix x;
  std::vector<SubjectIndex> ids;
  std::vector<int> labels;  // empty when the dataset has none
};

inline StackedRows stack_rows(const MultiSubjectDataset& data, SubjectIndex subject_offset = 0) {
  StackedRows out;
  out.x = Matrix(data.total_timesteps(), data.n_features);
  const bool labels = data.has_labels();
  std::size_t r = 0;
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto& rec = data.subjects[s];
    std::copy(rec.x.values().begin(), rec.x.values().end(),
              out.x.values().begin() + static_cast<std::ptrdiff_t>(r * data.n_features));
    for (std::size_t t = 0; t < rec.timesteps(); ++t) {
      out.ids.push_back(static_cast<SubjectIndex>(s) + subject_offset);
      if (labels) out.labels.push_back((*rec.labels)[t]);
    }
    r += rec.timesteps();
  }
  return out;
}

enum class DatasetFormat { Binary, CsvManifest };

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename T>
  void le(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    bytes(raw, sizeof(T));
  }
  const std::vector<unsigned char>& buffer() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> buf) : buf_(std::move(buf)) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > buf_.size())
      throw ParseError(std::string("truncated input reading ") + what + " at byte offset " +
                       std::to_string(pos_) + " (have " + std::to_string(buf_.size()) + " bytes)");
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(std::string_view s, const std::string& where) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError(where + ": not a number '" + std::string(s) + "'");
  return v;
}

}  // namespace detail

constexpr std::uint16_t kDatasetVersion = 1;

/// Packed binary encoding of a dataset.
inline std::vector<unsigned char> encode_dataset(const MultiSubjectDataset& data) {
  data.validate();
  detail::ByteWriter w;
  w.bytes("SMDS", 4);
  w.le<std::uint16_t>(kDatasetVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(data.n_features));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(data.size()));
  for (const auto& s : data.subjects) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(s.subject_id.size()));
    w.bytes(s.subject_id.data(), s.subject_id.size());
    w.le<std::int32_t>(s.group ? *s.group : -1);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(s.timesteps()));
    for (double v : s.x.values()) w.le<double>(v);
    w.le<std::uint8_t>(s.labels ? 1 : 0);
    if (s.labels)
      for (int l : *s.labels) w.le<std::int32_t>(l);
  }
  return w.buffer();
}

inline MultiSubjectDataset decode_dataset(std::vector<unsigned char> bytes) {
  detail::ByteReader r(std::move(bytes));
  if (r.str(4, "magic") != "SMDS") throw ParseError("bad magic at byte offset 0");
  const auto version = r.le<std::uint16_t>("version");
  if (version != kDatasetVersion)
    throw ParseError("unsupported dataset version " + std::to_string(version));
  MultiSubjectDataset data;
  data.n_features = r.le<std::uint32_t>("N");
  const auto m = r.le<std::uint32_t>("M");
  for (std::uint32_t i = 0; i < m; ++i) {
    SubjectRecord s;
    const auto id_len = r.le<std::uint32_t>("subject id length");
    s.subject_id = r.str(id_len, "subject id");
    const auto group = r.le<std::int32_t>("group");
    if (group != -1) s.group = group;
    const auto t = r.le<std::uint32_t>("T");
    r.need(static_cast<std::size_t>(t) * data.n_features * sizeof(double), "sample block");
    s.x = Matrix(t, data.n_features);
    for (auto& v : s.x.values()) v = r.le<double>("sample");
    const auto flag = r.le<std::uint8_t>("label flag");
    if (flag > 1)
      throw ParseError("bad label flag at byte offset " + std::to_string(r.offset() - 1));
    if (flag) {
      std::vector<int> labels(t);
      for (auto& l : labels) l = r.le<std::int32_t>("label");
      s.labels = std::move(labels);
    }
    data.subjects.push_back(std::move(s));
  }
  if (!r.at_end())
    throw ParseError("trailing bytes after byte offset " + std::to_string(r.offset()));
  data.validate();
  return data;
}

namespace detail {

inline Matrix read_csv_matrix(const std::filesystem::path& path, std::size_t expected_cols,
                              const std::string& subject) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<double> values;
  std::string line;
  std::size_t rows = 0;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::size_t cols = 0;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      const std::string where = path.string() + ":" + std::to_string(line_no);
      values.push_back(parse_double(std::string_view(line).substr(start, comma - start), where));
      ++cols;
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (cols != expected_cols)
      throw ShapeMismatch("subject '" + subject + "' " + path.string() + ":" +
                          std::to_string(line_no) + " has " + std::to_string(cols) +
                          " columns, manifest says N=" + std::to_string(expected_cols));
    ++rows;
  }
  Matrix m(rows, expected_cols);
  m.values() = std::move(values);
  return m;
}

inline std::vector<int> read_label_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    int v = 0;
    auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), v);
    if (ec != std::errc() || ptr != line.data() + line.size())
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad label '" + line + "'");
    labels.push_back(v);
  }
  return labels;
}

inline MultiSubjectDataset load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw ParseError("cannot open " + manifest_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(manifest_path.string() + ": " + e.what());
  }
  const auto base = manifest_path.parent_path();
  auto field = [&](const nlohmann::json& obj, const char* key, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key))
      throw MissingManifestField(where + " lacks '" + key + "'");
    return obj.at(key);
  };
  MultiSubjectDataset data;
  data.n_features = field(j, "n_features", "manifest").get<std::size_t>();
  if (j.contains("generator")) data.metadata.generator = j.at("generator").get<std::string>();
  if (j.contains("seed")) data.metadata.seed = j.at("seed").get<std::uint64_t>();
  const auto& subjects = field(j, "subjects", "manifest");
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const auto& entry = subjects[i];
    const std::string where = "manifest subject #" + std::to_string(i);
    SubjectRecord s;
    s.subject_id = field(entry, "subject_id", where).get<std::string>();
    const auto csv = field(entry, "csv_path", where).get<std::string>();
    s.x = read_csv_matrix(base / csv, data.n_features, s.subject_id);
    if (entry.contains("group") && !entry.at("group").is_null()) s.group = entry.at("group").get<int>();
    if (entry.contains("label_path") && !entry.at("label_path").is_null())
      s.labels = read_label_file(base / entry.at("label_path").get<std::string>());
    data.subjects.push_back(std::move(s));
  }
  data.validate();
  return data;
}

inline void save_manifest(const MultiSubjectDataset& data, const std::filesystem::path& manifest_path) {
  data.validate();
  const auto base = manifest_path.parent_path();
  if (!base.empty()) std::filesystem::create_directories(base);
  nlohmann::json j;
  j["n_features"] = data.n_features;
  j["generator"] = data.metadata.generator;
  j["seed"] = data.metadata.seed;
  j["subjects"] = nlohmann::json::array();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data.subjects[i];
    const std::string stem = "subject_" + std::to_string(i);
    {
      std::ofstream out(base / (stem + ".csv"));
      for (std::size_t r = 0; r < s.x.rows(); ++r) {
        for (std::size_t c = 0; c < s.x.cols(); ++c)
          out << (c ? "," : "") << format_double(s.x(r, c));
        out << '\n';
      }
    }
    nlohmann::json e;
    e["subject_id"] = s.subject_id;
    e["csv_path"] = stem + ".csv";
    e["group"] = s.group ? nlohmann::json(*s.group) : nlohmann::json(nullptr);
    if (s.labels) {
      std::ofstream out(base / (stem + ".labels"));
      for (int l : *s.labels) out << l << '\n';
      e["label_path"] = stem + ".labels";
    } else {
      e["label_path"] = nullptr;
    }
    j["subjects"].push_back(std::move(e));
  }
  std::ofstream out(manifest_path);
  out << j.dump(2) << '\n';
}

}  // namespace detail

inline DatasetFormat format_for_path(const std::filesystem::path& path) {
  return path.extension() == ".json" ? DatasetFormat::CsvManifest : DatasetFormat::Binary;
}

inline MultiSubjectDataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  if (format == DatasetFormat::CsvManifest) return detail::load_manifest(path);
  return decode_dataset(detail::read_file_bytes(path));
}

inline MultiSubjectDataset load_dataset(const std::filesystem::path& path) {
  return load_dataset(path, format_for_path(path));
}

inline void save_dataset(const MultiSubjectDataset& data, const std::filesystem::path& path,
                         DatasetFormat format) {
  if (format == DatasetFormat::CsvManifest) return detail::save_manifest(data, path);
  detail::write_file_bytes(path, encode_dataset(data));
}

inline void save_dataset(const MultiSubjectDataset& data, const std::filesystem::path& path) {
  save_dataset(data, path, format_for_path(path));
}

}  // namespace subjmap
