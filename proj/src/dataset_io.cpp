#include "gradmask/dataset_io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "gradmask/error.hpp"

namespace gradmask {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "binary_records I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'G', 'M', 'S', 'K'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint32_t kNoMask = 0xFFFFFFFFu;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path, "-", "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RuntimeFailure("write failed: " + path.string());
}

std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

// ------------------------------------------------------------------ binary

class Writer {
 public:
  template <typename T>
  void put(T v) {
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    out_.append(raw, sizeof(T));
  }
  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void put_bytes(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view bytes, const fs::path& origin)
      : bytes_(bytes), origin_(origin) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  void set_record(std::size_t r) { record_ = r; }

  [[noreturn]] void fail(const std::string& what) const {
    throw DataError(origin_,
                    "record " + std::to_string(record_) + ", byte " +
                        std::to_string(pos_),
                    what);
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail("truncated input");
  }
  std::string_view bytes_;
  fs::path origin_;
  std::size_t pos_ = 0;
  std::size_t record_ = 0;
};

// ------------------------------------------------------------------ csv_dir

std::vector<double> parse_signal_csv(const fs::path& file, std::size_t leads,
                                     std::size_t samples) {
  const std::string text = read_file(file);
  std::vector<double> out;
  out.reserve(leads * samples);
  std::size_t row = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string_view line(text.data() + pos, eol - pos);
    pos = eol + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (row >= leads) {
      throw DataError(file, "row " + std::to_string(row + 1),
                      "more than " + std::to_string(leads) + " lead rows");
    }
    std::size_t col = 0;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    while (p <= end) {
      const char* comma = std::find(p, end, ',');
      while (p < comma && *p == ' ') ++p;
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(p, comma, v);
      if (ec != std::errc() || ptr != comma) {
        throw DataError(file,
                        "row " + std::to_string(row + 1) + ", column " +
                            std::to_string(col + 1),
                        "malformed number '" + std::string(p, comma) + "'");
      }
      if (!std::isfinite(v)) {
        throw DataError(file,
                        "row " + std::to_string(row + 1) + ", column " +
                            std::to_string(col + 1),
                        "non-finite sample");
      }
      out.push_back(v);
      ++col;
      p = comma + 1;
    }
    if (col != samples) {
      throw DataError(file, "row " + std::to_string(row + 1),
                      "shape mismatch: " + std::to_string(col) +
                          " samples, expected " + std::to_string(samples));
    }
    ++row;
  }
  if (row != leads) {
    throw DataError(file, "end of file",
                    "shape mismatch: " + std::to_string(row) +
                        " lead rows, expected " + std::to_string(leads));
  }
  return out;
}

MaskSet parse_mask_file(const fs::path& file, std::size_t leads,
                        std::size_t samples) {
  json j;
  try {
    j = json::parse(read_file(file));
    std::vector<Interval> intervals;
    for (const auto& triple : j.at("intervals")) {
      if (!triple.is_array() || triple.size() != 3) {
        throw DataError(file, "interval " + std::to_string(intervals.size()),
                        "expected [lead, start, end]");
      }
      intervals.push_back({triple[0].get<std::size_t>(),
                           triple[1].get<std::size_t>(),
                           triple[2].get<std::size_t>()});
    }
    const auto source =
        parse_mask_source(j.value("source", std::string("ground_truth")));
    return MaskSet(std::move(intervals), leads, samples, source,
                   j.value("note", std::string()));
  } catch (const DataError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError(file, "-", std::string("malformed mask file: ") + e.what());
  }
}

std::vector<int> parse_labels(const json& labels, const fs::path& file,
                              const std::string& id,
                              const std::vector<std::string>& names) {
  std::vector<int> out;
  if (labels.is_array() && !labels.empty() && labels.front().is_string()) {
    // Names of the present labels.
    out.assign(names.size(), -1);
    for (const auto& n : labels) {
      const auto it = std::find(names.begin(), names.end(), n.get<std::string>());
      if (it == names.end()) {
        throw DataError(file, "record '" + id + "'",
                        "unknown label name '" + n.get<std::string>() + "'");
      }
      out[static_cast<std::size_t>(it - names.begin())] = 1;
    }
    return out;
  }
  for (const auto& v : labels) out.push_back(v.get<int>());
  if (out.size() != names.size()) {
    throw DataError(file, "record '" + id + "'",
                    "shape mismatch: " + std::to_string(out.size()) +
                        " labels, expected K=" + std::to_string(names.size()));
  }
  for (int y : out) {
    if (y != 1 && y != -1) {
      throw DataError(file, "record '" + id + "'",
                      "label value " + std::to_string(y) + " is not +1/-1");
    }
  }
  return out;
}

DatasetManifest load_csv_dir(const fs::path& dir) {
  const fs::path manifest_file = dir / "manifest.json";
  json j;
  try {
    j = json::parse(read_file(manifest_file));
  } catch (const json::exception& e) {
    throw DataError(manifest_file, "-", e.what());
  }
  DatasetManifest m;
  std::size_t record = 0;
  try {
    m.n_classes = j.at("K").get<std::size_t>();
    m.leads = j.at("L").get<std::size_t>();
    m.samples = j.at("T").get<std::size_t>();
    m.sample_rate_hz = j.at("sample_rate_hz").get<double>();
    m.label_names = j.at("label_names").get<std::vector<std::string>>();
    if (m.label_names.size() != m.n_classes) {
      throw DataError(manifest_file, "label_names",
                      "shape mismatch: " + std::to_string(m.label_names.size()) +
                          " names for K=" + std::to_string(m.n_classes));
    }
    for (const auto& r : j.at("records")) {
      SignalExample ex;
      ex.id = r.at("id").get<std::string>();
      ex.leads = m.leads;
      ex.samples = m.samples;
      ex.sample_rate_hz = m.sample_rate_hz;
      ex.split = parse_split(r.value("split", std::string("train")));
      ex.labels = parse_labels(r.at("labels"), manifest_file, ex.id,
                               m.label_names);
      const fs::path sig_file =
          dir / r.value("signal_file", "signals/" + ex.id + ".csv");
      ex.signal = parse_signal_csv(sig_file, m.leads, m.samples);
      const fs::path mask_file = dir / "masks" / (ex.id + ".json");
      if (fs::exists(mask_file)) {
        ex.mask = parse_mask_file(mask_file, m.leads, m.samples);
      }
      m.examples.push_back(std::move(ex));
      ++record;
    }
  } catch (const DataError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError(manifest_file, "record " + std::to_string(record), e.what());
  }
  m.validate();
  return m;
}

void save_csv_dir(const DatasetManifest& m, const fs::path& dir) {
  fs::create_directories(dir / "signals");
  fs::create_directories(dir / "masks");
  json j;
  j["K"] = m.n_classes;
  j["L"] = m.leads;
  j["T"] = m.samples;
  j["sample_rate_hz"] = m.sample_rate_hz;
  j["label_names"] = m.label_names;
  json records = json::array();
  for (const auto& ex : m.examples) {
    const std::string sig_rel = "signals/" + ex.id + ".csv";
    records.push_back({{"id", ex.id},
                       {"signal_file", sig_rel},
                       {"labels", ex.labels},
                       {"split", std::string(to_string(ex.split))}});
    std::string csv;
    for (std::size_t l = 0; l < ex.leads; ++l) {
      const auto row = ex.lead(l);
      for (std::size_t s = 0; s < row.size(); ++s) {
        if (s) csv += ',';
        csv += format_double(row[s]);
      }
      csv += '\n';
    }
    write_file(dir / sig_rel, csv);
    const fs::path mask_file = dir / "masks" / (ex.id + ".json");
    if (ex.mask) {
      json mj;
      mj["intervals"] = json::array();
      for (const auto& iv : ex.mask->intervals()) {
        mj["intervals"].push_back({iv.lead, iv.start, iv.end});
      }
      mj["source"] = std::string(to_string(ex.mask->source()));
      mj["note"] = ex.mask->note();
      write_file(mask_file, mj.dump(2) + "\n");
    } else if (fs::exists(mask_file)) {
      fs::remove(mask_file);
    }
  }
  j["records"] = std::move(records);
  write_file(dir / "manifest.json", j.dump(2) + "\n");
}

}  // namespace

DataError::DataError(const fs::path& file, const std::string& position,
                     const std::string& what)
    : ValidationError(file.string() + " (" + position + "): " + what) {}

DatasetFormat parse_dataset_format(std::string_view text) {
  if (text == "csv_dir" || text == "csv") return DatasetFormat::kCsvDir;
  if (text == "binary_records" || text == "binary") {
    return DatasetFormat::kBinaryRecords;
  }
  throw ValidationError("unknown dataset format '" + std::string(text) + "'");
}

std::string encode_binary(const DatasetManifest& m) {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put(kVersion);
  w.put(static_cast<std::uint32_t>(m.n_classes));
  for (const auto& name : m.label_names) w.put_string(name);
  w.put(m.sample_rate_hz);
  w.put(static_cast<std::uint32_t>(m.examples.size()));
  for (const auto& ex : m.examples) {
    w.put_string(ex.id);
    w.put(static_cast<std::uint32_t>(ex.leads));
    w.put(static_cast<std::uint32_t>(ex.samples));
    for (double v : ex.signal) w.put(static_cast<float>(v));
    for (int y : ex.labels) w.put(static_cast<std::int8_t>(y));
    w.put(static_cast<std::uint8_t>(ex.split));
    if (!ex.mask) {
      w.put(kNoMask);
      continue;
    }
    w.put(static_cast<std::uint32_t>(ex.mask->intervals().size()));
    for (const auto& iv : ex.mask->intervals()) {
      w.put(static_cast<std::uint32_t>(iv.lead));
      w.put(static_cast<std::uint32_t>(iv.start));
      w.put(static_cast<std::uint32_t>(iv.end));
    }
    w.put(static_cast<std::uint8_t>(ex.mask->source()));
    w.put_string(ex.mask->note());
  }
  return w.take();
}

DatasetManifest decode_binary(std::string_view bytes, const fs::path& origin) {
  Reader r(bytes, origin);
  char magic[4];
  for (auto& c : magic) c = r.get<char>();
  if (std::memcmp(magic, kMagic, 4) != 0) r.fail("bad magic, expected GMSK");
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) {
    r.fail("unsupported version " + std::to_string(version));
  }
  DatasetManifest m;
  m.n_classes = r.get<std::uint32_t>();
  for (std::size_t k = 0; k < m.n_classes; ++k) {
    m.label_names.push_back(r.get_string());
  }
  m.sample_rate_hz = r.get<double>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    r.set_record(i);
    SignalExample ex;
    ex.id = r.get_string();
    ex.leads = r.get<std::uint32_t>();
    ex.samples = r.get<std::uint32_t>();
    ex.sample_rate_hz = m.sample_rate_hz;
    if (i == 0) {
      m.leads = ex.leads;
      m.samples = ex.samples;
    } else if (ex.leads != m.leads || ex.samples != m.samples) {
      r.fail("shape mismatch for '" + ex.id + "'");
    }
    ex.signal.resize(ex.leads * ex.samples);
    for (auto& v : ex.signal) {
      v = static_cast<double>(r.get<float>());
      if (!std::isfinite(v)) r.fail("non-finite sample in '" + ex.id + "'");
    }
    ex.labels.resize(m.n_classes);
    for (auto& y : ex.labels) y = r.get<std::int8_t>();
    const auto split = r.get<std::uint8_t>();
    if (split > 2) r.fail("bad split code");
    ex.split = static_cast<Split>(split);
    const auto n_iv = r.get<std::uint32_t>();
    if (n_iv != kNoMask) {
      std::vector<Interval> intervals(n_iv);
      for (auto& iv : intervals) {
        iv.lead = r.get<std::uint32_t>();
        iv.start = r.get<std::uint32_t>();
        iv.end = r.get<std::uint32_t>();
      }
      const auto source = r.get<std::uint8_t>();
      if (source > 1) r.fail("bad mask source code");
      std::string note = r.get_string();
      try {
        ex.mask = MaskSet(std::move(intervals), ex.leads, ex.samples,
                          static_cast<MaskSource>(source), std::move(note));
      } catch (const ValidationError& e) {
        r.fail(std::string("malformed mask: ") + e.what());
      }
    }
    try {
      ex.validate(m.n_classes);
    } catch (const ValidationError& e) {
      r.fail(e.what());
    }
    m.examples.push_back(std::move(ex));
  }
  if (!r.done()) r.fail("trailing bytes");
  m.validate();
  return m;
}

DatasetManifest load_dataset(const fs::path& path, DatasetFormat format) {
  if (!fs::exists(path)) throw DataError(path, "-", "path does not exist");
  if (format == DatasetFormat::kCsvDir) return load_csv_dir(path);
  return decode_binary(read_file(path), path);
}

DatasetManifest load_dataset(const fs::path& path) {
  return load_dataset(path, fs::is_directory(path)
                                ? DatasetFormat::kCsvDir
                                : DatasetFormat::kBinaryRecords);
}

void save_dataset(const DatasetManifest& manifest, const fs::path& path,
                  DatasetFormat format) {
  manifest.validate();
  if (format == DatasetFormat::kCsvDir) {
    save_csv_dir(manifest, path);
    return;
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path, encode_binary(manifest));
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fingerprint(const DatasetManifest& manifest) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(encode_binary(manifest))));
  return buf;
}

}  // namespace gradmask
