#include "sact/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace sact {

namespace {

constexpr char kCheckpointMagic[] = "SACTCKPT";
constexpr char kDatasetMagic[] = "SACTDATA";
constexpr char kMaskMagic[] = "SACTMASK";
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  std::string_view take(std::size_t n) {
    if (data_.size() - pos_ < n)
      throw FormatError(what_ + ": truncated file (needed " + std::to_string(n) + " bytes at offset " +
                        std::to_string(pos_) + ")");
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename U>
  U uint() {
    const auto s = take(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  void magic(const char* expected) {
    const auto s = take(8);
    if (s != std::string_view(expected, 8))
      throw FormatError(what_ + ": bad magic, expected \"" + std::string(expected) + "\"");
  }
  void version() {
    const auto v = uint<std::uint32_t>();
    if (v != kVersion) throw FormatError(what_ + ": unsupported format version " + std::to_string(v));
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string what_;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

}  // namespace

CheckpointMismatch::CheckpointMismatch(std::vector<std::string> problems)
    : std::runtime_error([&] {
        std::string msg = "checkpoint does not match the network:";
        for (const auto& p : problems) msg += "\n  " + p;
        return msg;
      }()),
      problems_(std::move(problems)) {}

// ---------------------------------------------------------------------------

std::uint64_t CheckpointEntry::count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

template <typename Scalar>
CheckpointEntry CheckpointEntry::from_tensor(std::string name, const Tensor<Scalar>& tensor) {
  CheckpointEntry e;
  e.name = std::move(name);
  const Shape s = tensor.shape();
  e.dims = {static_cast<std::uint64_t>(s.batch), static_cast<std::uint64_t>(s.height),
            static_cast<std::uint64_t>(s.width), static_cast<std::uint64_t>(s.channels)};
  e.dtype = sizeof(Scalar) == 4 ? DType::f32 : DType::f64;
  Writer w;
  for (Scalar v : tensor.values()) {
    if constexpr (sizeof(Scalar) == 4) w.f32(v);
    else w.f64(v);
  }
  const std::string raw = w.take();
  e.bytes.resize(raw.size());
  std::memcpy(e.bytes.data(), raw.data(), raw.size());
  return e;
}

template <typename Scalar>
Tensor<Scalar> CheckpointEntry::to_tensor() const {
  if (dims.size() > 4) throw FormatError("checkpoint entry '" + name + "' has rank " + std::to_string(dims.size()));
  std::vector<std::uint64_t> d(4 - dims.size(), 1);
  d.insert(d.end(), dims.begin(), dims.end());
  Tensor<Scalar> t(Shape{static_cast<Index>(d[0]), static_cast<Index>(d[1]), static_cast<Index>(d[2]),
                         static_cast<Index>(d[3])});
  Reader r(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), "checkpoint entry " + name);
  for (Index i = 0; i < t.size(); ++i) {
    if (dtype == DType::f32) t[i] = static_cast<Scalar>(r.f32());
    else t[i] = static_cast<Scalar>(std::bit_cast<double>(r.uint<std::uint64_t>()));
  }
  return t;
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::set<std::string> names;
  Writer w;
  w.bytes(kCheckpointMagic, 8);
  w.uint<std::uint32_t>(kVersion);
  w.uint<std::uint64_t>(ckpt.entries.size());
  for (const auto& e : ckpt.entries) {
    if (!names.insert(e.name).second) throw FormatError("checkpoint: duplicate tensor name '" + e.name + "'");
    if (e.bytes.size() != e.count() * dtype_size(e.dtype))
      throw FormatError("checkpoint: entry '" + e.name + "' payload does not match its dims");
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) w.uint<std::uint64_t>(d);
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(e.dtype));
    w.bytes(e.bytes.data(), e.bytes.size());
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes, "checkpoint");
  r.magic(kCheckpointMagic);
  r.version();
  const auto count = r.uint<std::uint64_t>();
  Checkpoint ckpt;
  std::set<std::string> names;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = r.uint<std::uint32_t>();
    e.name = std::string(r.take(len));
    if (!names.insert(e.name).second) throw FormatError("checkpoint: duplicate tensor name '" + e.name + "'");
    const auto rank = r.uint<std::uint32_t>();
    if (rank > 4) throw FormatError("checkpoint: entry '" + e.name + "' has unsupported rank " + std::to_string(rank));
    for (std::uint32_t k = 0; k < rank; ++k) e.dims.push_back(r.uint<std::uint64_t>());
    const auto tag = r.uint<std::uint8_t>();
    if (tag != 1 && tag != 2) throw FormatError("checkpoint: entry '" + e.name + "' has unknown dtype tag " + std::to_string(tag));
    e.dtype = static_cast<DType>(tag);
    const auto payload = r.take(e.count() * dtype_size(e.dtype));
    e.bytes.resize(payload.size());
    std::memcpy(e.bytes.data(), payload.data(), payload.size());
    ckpt.entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes after the last entry");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

template <typename Scalar>
Checkpoint make_checkpoint(const NetworkParams<Scalar>& params) {
  Checkpoint ckpt;
  for_each_parameter<Scalar>(params, [&](const std::string& name, const Tensor<Scalar>& t, ParamKind) {
    ckpt.entries.push_back(CheckpointEntry::from_tensor(name, t));
  });
  return ckpt;
}

template <typename Scalar>
LoadReport load_into(NetworkParams<Scalar>& params, const Checkpoint& ckpt, bool strict) {
  LoadReport report;
  std::vector<std::string> problems;
  std::set<std::string> expected;
  for_each_parameter<Scalar>(params, [&](const std::string& name, Tensor<Scalar>& t, ParamKind) {
    expected.insert(name);
    const CheckpointEntry* e = ckpt.find(name);
    if (e == nullptr) {
      report.missing.push_back(name);
      if (strict) problems.push_back(name + ": missing from checkpoint");
      return;
    }
    Tensor<Scalar> loaded = e->to_tensor<Scalar>();
    if (!(loaded.shape() == t.shape())) {
      problems.push_back(name + ": shape " + loaded.shape().str() + " in checkpoint, expected " + t.shape().str());
      return;
    }
    t = std::move(loaded);
    report.loaded.push_back(name);
  });
  for (const auto& e : ckpt.entries)
    if (!expected.contains(e.name)) {
      report.skipped.push_back(e.name);
      if (strict) problems.push_back(e.name + ": not part of the network");
    }
  if (!problems.empty()) throw CheckpointMismatch(std::move(problems));
  return report;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> Dataset::images(std::span<const Index> indices) const {
  Tensor<Scalar> out(Shape{static_cast<Index>(indices.size()), height, width, channels});
  const Index n = image_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Index src = indices[i];
    if (src < 0 || src >= size()) throw std::out_of_range("Dataset::images: index " + std::to_string(src));
    for (Index k = 0; k < n; ++k)
      out[static_cast<Index>(i) * n + k] = static_cast<Scalar>(pixels[static_cast<std::size_t>(src * n + k)]);
  }
  return out;
}

std::vector<Index> Dataset::labels_of(std::span<const Index> indices) const {
  std::vector<Index> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(static_cast<Index>(labels.at(static_cast<std::size_t>(i))));
  return out;
}

std::string encode_dataset(const Dataset& data) {
  if (data.pixels.size() != static_cast<std::size_t>(data.size() * data.image_size()))
    throw FormatError("dataset: pixel buffer does not match count x H x W x C");
  Writer w;
  w.bytes(kDatasetMagic, 8);
  w.uint<std::uint32_t>(kVersion);
  w.uint<std::uint64_t>(data.labels.size());
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(data.height));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(data.width));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(data.channels));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(data.classes));
  const Index n = data.image_size();
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    if (data.labels[i] >= data.classes)
      throw FormatError("dataset: label " + std::to_string(data.labels[i]) + " >= class count");
    w.uint<std::uint32_t>(data.labels[i]);
    for (Index k = 0; k < n; ++k) w.f32(data.pixels[i * static_cast<std::size_t>(n) + static_cast<std::size_t>(k)]);
  }
  return w.take();
}

Dataset decode_dataset(std::string_view bytes) {
  Reader r(bytes, "dataset");
  r.magic(kDatasetMagic);
  r.version();
  const auto count = r.uint<std::uint64_t>();
  Dataset d;
  d.height = r.uint<std::uint32_t>();
  d.width = r.uint<std::uint32_t>();
  d.channels = r.uint<std::uint32_t>();
  d.classes = r.uint<std::uint32_t>();
  const Index n = d.image_size();
  d.labels.reserve(count);
  d.pixels.reserve(count * static_cast<std::uint64_t>(n));
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto label = r.uint<std::uint32_t>();
    if (label >= d.classes) throw FormatError("dataset: record " + std::to_string(i) + " has label >= class count");
    d.labels.push_back(label);
    for (Index k = 0; k < n; ++k) d.pixels.push_back(r.f32());
  }
  if (!r.done()) throw FormatError("dataset: trailing bytes after the last record");
  return d;
}

void save_dataset(const std::string& path, const Dataset& data) { write_file(path, encode_dataset(data)); }
Dataset load_dataset(const std::string& path) { return decode_dataset(read_file(path)); }

Field<double> ObjectMasks::mask(Index image) const {
  if (image < 0 || image >= size()) throw std::out_of_range("ObjectMasks::mask: index " + std::to_string(image));
  Field<double> f(height, width);
  for (Index i = 0; i < height * width; ++i)
    f(i / width, i % width) = values[static_cast<std::size_t>(image * height * width + i)] ? 1.0 : 0.0;
  return f;
}

void save_masks(const std::string& path, const ObjectMasks& masks) {
  Writer w;
  w.bytes(kMaskMagic, 8);
  w.uint<std::uint32_t>(kVersion);
  w.uint<std::uint64_t>(static_cast<std::uint64_t>(masks.size()));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(masks.height));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(masks.width));
  w.bytes(masks.values.data(), masks.values.size());
  write_file(path, w.take());
}

ObjectMasks load_masks(const std::string& path) {
  const std::string bytes = read_file(path);
  Reader r(bytes, "masks");
  r.magic(kMaskMagic);
  r.version();
  const auto count = r.uint<std::uint64_t>();
  ObjectMasks m;
  m.height = r.uint<std::uint32_t>();
  m.width = r.uint<std::uint32_t>();
  const auto payload = r.take(count * static_cast<std::uint64_t>(m.height * m.width));
  m.values.assign(payload.begin(), payload.end());
  if (!r.done()) throw FormatError("masks: trailing bytes");
  return m;
}

std::string masks_path(const std::string& dataset_path) { return dataset_path + ".masks"; }

// ---------------------------------------------------------------------------

SyntheticData generate_synthetic_dataset(const SyntheticConfig& cfg) {
  if (cfg.height < 16 || cfg.width < 16) throw std::invalid_argument("make-data: image dims must be at least 16x16");
  if (cfg.classes < 2) throw std::invalid_argument("make-data: at least two classes are required");
  if (cfg.count < 0 || cfg.channels < 1) throw std::invalid_argument("make-data: invalid count or channel number");
  if (!(0 < cfg.min_side && cfg.min_side <= cfg.max_side && cfg.max_side <= 1))
    throw std::invalid_argument("make-data: patch side bounds must satisfy 0 < min <= max <= 1");

  std::mt19937_64 rng(cfg.seed);
  SyntheticData out;
  Dataset& d = out.data;
  d.height = cfg.height;
  d.width = cfg.width;
  d.channels = cfg.channels;
  d.classes = cfg.classes;
  out.masks.height = cfg.height;
  out.masks.width = cfg.width;

  for (Index i = 0; i < cfg.count; ++i) d.labels.push_back(static_cast<std::uint32_t>(i % cfg.classes));
  std::shuffle(d.labels.begin(), d.labels.end(), rng);

  const Index side_ref = std::min(cfg.height, cfg.width);
  const auto lo = static_cast<Index>(std::ceil(cfg.min_side * static_cast<double>(side_ref)));
  const auto hi = static_cast<Index>(std::floor(cfg.max_side * static_cast<double>(side_ref)));
  if (lo > hi) throw std::invalid_argument("make-data: no integer patch side fits the side-fraction bounds");

  std::normal_distribution<double> noise(0.0, cfg.noise);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double pi = std::acos(-1.0);
  d.pixels.resize(static_cast<std::size_t>(cfg.count * d.image_size()));
  out.masks.values.assign(static_cast<std::size_t>(cfg.count * cfg.height * cfg.width), 0);

  for (Index i = 0; i < cfg.count; ++i) {
    const Index label = d.labels[static_cast<std::size_t>(i)];
    const Index side = std::uniform_int_distribution<Index>(lo, hi)(rng);
    const Index top = std::uniform_int_distribution<Index>(0, cfg.height - side)(rng);
    const Index left = std::uniform_int_distribution<Index>(0, cfg.width - side)(rng);
    const double phase = 2 * pi * unit(rng);
    // Class identity is carried by the stripe orientation.
    const double theta = pi * static_cast<double>(label) / static_cast<double>(cfg.classes);
    const double freq = 2 * pi / 4.0;
    float* img = d.pixels.data() + i * d.image_size();
    for (Index y = 0; y < cfg.height; ++y)
      for (Index x = 0; x < cfg.width; ++x) {
        const bool inside = y >= top && y < top + side && x >= left && x < left + side;
        const double stripe =
            inside ? std::sin(freq * (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) +
                              phase)
                   : 0.0;
        for (Index c = 0; c < cfg.channels; ++c)
          img[(y * cfg.width + x) * cfg.channels + c] = static_cast<float>(stripe + noise(rng));
        if (inside) out.masks.values[static_cast<std::size_t>((i * cfg.height + y) * cfg.width + x)] = 1;
      }
  }
  return out;
}

// ---------------------------------------------------------------------------

void write_pgm(const std::string& path, const Field<double>& field) {
  const double lo = field.size() ? field.minCoeff() : 0.0;
  const double hi = field.size() ? field.maxCoeff() : 0.0;
  std::string bytes = "P5\n" + std::to_string(field.cols()) + " " + std::to_string(field.rows()) + "\n255\n";
  for (Index i = 0; i < field.rows(); ++i)
    for (Index j = 0; j < field.cols(); ++j) {
      const double v = hi > lo ? (field(i, j) - lo) / (hi - lo) * 255.0 : 0.0;
      bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 255.0)))));
    }
  write_file(path, bytes);
}

Field<double> read_pgm(const std::string& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw FormatError("pgm '" + path + "': truncated header");
    return bytes.substr(start, pos - start);
  };
  if (token() != "P5") throw FormatError("pgm '" + path + "': expected binary P5 magic");
  const Index w = std::stoll(token());
  const Index h = std::stoll(token());
  const Index maxval = std::stoll(token());
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw FormatError("pgm '" + path + "': invalid header");
  ++pos;  // single whitespace byte after maxval
  const std::size_t bpp = maxval < 256 ? 1 : 2;
  if (bytes.size() - std::min(pos, bytes.size()) < static_cast<std::size_t>(w * h) * bpp)
    throw FormatError("pgm '" + path + "': truncated pixel data");
  Field<double> f(h, w);
  for (Index i = 0; i < h * w; ++i) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos + static_cast<std::size_t>(i) * bpp);
    f(i / w, i % w) = bpp == 1 ? p[0] : (p[0] << 8 | p[1]);
  }
  return f;
}

void write_csv(const std::string& path, const Field<double>& field) {
  std::ostringstream os;
  os.precision(17);
  for (Index i = 0; i < field.rows(); ++i) {
    for (Index j = 0; j < field.cols(); ++j) os << (j ? "," : "") << field(i, j);
    os << '\n';
  }
  write_file(path, os.str());
}

Field<double> read_csv(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw FormatError("csv '" + path + "': not a number: '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw FormatError("csv '" + path + "': ragged rows");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError("csv '" + path + "': empty");
  Field<double> f(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) f(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  return f;
}

std::vector<std::pair<Index, Index>> read_fixations(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<std::pair<Index, Index>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("missing comma");
      out.emplace_back(std::stoll(line.substr(0, comma)), std::stoll(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw FormatError("fixations '" + path + "' line " + std::to_string(line_no) + ": expected row,col");
    }
  }
  return out;
}

#define SACT_INSTANTIATE_IO(S)                                                                  \
  template CheckpointEntry CheckpointEntry::from_tensor(std::string, const Tensor<S>&);         \
  template Tensor<S> CheckpointEntry::to_tensor() const;                                        \
  template Checkpoint make_checkpoint(const NetworkParams<S>&);                                 \
  template LoadReport load_into(NetworkParams<S>&, const Checkpoint&, bool);                    \
  template Tensor<S> Dataset::images(std::span<const Index>) const;

SACT_INSTANTIATE_IO(float)
SACT_INSTANTIATE_IO(double)

}  // namespace sact
