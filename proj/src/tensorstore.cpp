#include "osaq/tensorstore.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace osaq {

namespace {

constexpr char kMagic[8] = {'O', 'S', 'A', 'Q', 'T', 'N', 'S', 'R'};
constexpr std::size_t kAlign = 8;

std::size_t aligned(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

bool valid_utf8(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b = static_cast<unsigned char>(s[i]);
    std::size_t len;
    if (b < 0x80) len = 1;
    else if ((b & 0xE0) == 0xC0) len = 2;
    else if ((b & 0xF0) == 0xE0) len = 3;
    else if ((b & 0xF8) == 0xF0) len = 4;
    else return false;
    if (i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k)
      if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return false;
    i += len;
  }
  return true;
}

}  // namespace

std::size_t dtype_size(Dtype dt) {
  switch (dt) {
    case Dtype::F32: return 4;
    case Dtype::F64: return 8;
    case Dtype::I32: return 4;
    case Dtype::U8: return 1;
  }
  return 0;
}

const char* dtype_tag(Dtype dt) {
  switch (dt) {
    case Dtype::F32: return "f32";
    case Dtype::F64: return "f64";
    case Dtype::I32: return "i32";
    case Dtype::U8: return "u8";
  }
  return "?";
}

Dtype dtype_from_tag(const std::string& tag) {
  if (tag == "f32") return Dtype::F32;
  if (tag == "f64") return Dtype::F64;
  if (tag == "i32") return Dtype::I32;
  if (tag == "u8") return Dtype::U8;
  raise(ErrorKind::UnknownDtype, "unknown dtype tag '" + tag + "'");
}

std::size_t Tensor::element_count() const {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor Tensor::from_matrix(const Matrix& m, Dtype dt) {
  Tensor t = from_doubles(m.data(), dt);
  t.shape = {m.rows(), m.cols()};
  return t;
}

Tensor Tensor::from_doubles(std::span<const double> v, Dtype dt) {
  Tensor t;
  t.dtype = dt;
  t.shape = {v.size()};
  if (dt == Dtype::F64) {
    t.bytes.resize(v.size() * 8);
    std::memcpy(t.bytes.data(), v.data(), t.bytes.size());
  } else if (dt == Dtype::F32) {
    t.bytes.resize(v.size() * 4);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const float f = static_cast<float>(v[i]);
      std::memcpy(t.bytes.data() + i * 4, &f, 4);
    }
  } else {
    raise(ErrorKind::UnknownDtype, "from_doubles requires a float dtype");
  }
  return t;
}

Tensor Tensor::from_i32(std::span<const std::int32_t> v) {
  Tensor t;
  t.dtype = Dtype::I32;
  t.shape = {v.size()};
  t.bytes.resize(v.size() * 4);
  std::memcpy(t.bytes.data(), v.data(), t.bytes.size());
  return t;
}

Tensor Tensor::from_u8(std::span<const std::uint8_t> v, std::vector<std::size_t> shape) {
  Tensor t;
  t.dtype = Dtype::U8;
  t.shape = std::move(shape);
  t.bytes.assign(v.begin(), v.end());
  if (t.element_count() != v.size()) raise(ErrorKind::DimMismatch, "u8 shape/payload mismatch");
  return t;
}

Matrix Tensor::to_matrix() const {
  if (shape.size() != 2) raise(ErrorKind::DimMismatch, "to_matrix requires a 2-D tensor");
  const std::vector<double> vals = to_doubles();
  Matrix m(shape[0], shape[1]);
  std::copy(vals.begin(), vals.end(), m.data().begin());
  return m;
}

std::vector<double> Tensor::to_doubles() const {
  std::vector<double> out(element_count());
  if (dtype == Dtype::F64) {
    std::memcpy(out.data(), bytes.data(), bytes.size());
  } else if (dtype == Dtype::F32) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      float f;
      std::memcpy(&f, bytes.data() + i * 4, 4);
      out[i] = static_cast<double>(f);
    }
  } else {
    raise(ErrorKind::UnknownDtype, "to_doubles requires a float dtype");
  }
  if (!all_finite(out)) raise(ErrorKind::NonFinite, "archived tensor contains NaN/Inf");
  return out;
}

std::vector<std::int32_t> Tensor::to_i32() const {
  if (dtype != Dtype::I32) raise(ErrorKind::UnknownDtype, "to_i32 requires an i32 tensor");
  std::vector<std::int32_t> out(element_count());
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

const Tensor& TensorArchive::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) raise(ErrorKind::UnknownLayer, "archive has no tensor '" + name + "'");
  return it->second;
}

void ArchiveWriter::add(const std::string& name, Tensor tensor) {
  if (name.empty() || name.size() > 256 || !valid_utf8(name))
    raise(ErrorKind::MalformedHeader, "invalid tensor name");
  if (tensor.bytes.size() != tensor.element_count() * dtype_size(tensor.dtype))
    raise(ErrorKind::DimMismatch, "tensor payload does not match shape for '" + name + "'");
  if (tensor.dtype == Dtype::F32 || tensor.dtype == Dtype::F64) {
    // Finiteness is part of the write contract.
    (void)tensor.to_doubles();
  }
  auto [it, inserted] = tensors_.emplace(name, std::move(tensor));
  (void)it;
  if (!inserted) raise(ErrorKind::NameCollision, "duplicate tensor name '" + name + "'");
}

void ArchiveWriter::write(const std::filesystem::path& path) const {
  nlohmann::json header = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    header[name] = {{"dtype", dtype_tag(t.dtype)},
                    {"nbytes", t.bytes.size()},
                    {"offset", offset},
                    {"shape", t.shape}};
    offset = aligned(offset + t.bytes.size());
  }
  const std::string header_text = header.dump();

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorKind::IoError, "cannot open '" + tmp.string() + "' for writing");
    out.write(kMagic, 8);
    const std::uint64_t len = header_text.size();
    std::uint8_t len_le[8];
    for (int i = 0; i < 8; ++i) len_le[i] = static_cast<std::uint8_t>(len >> (8 * i));
    out.write(reinterpret_cast<const char*>(len_le), 8);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    static constexpr char kPad[kAlign] = {};
    for (const auto& [name, t] : tensors_) {
      out.write(reinterpret_cast<const char*>(t.bytes.data()),
                static_cast<std::streamsize>(t.bytes.size()));
      const std::size_t pad = aligned(t.bytes.size()) - t.bytes.size();
      if (pad > 0) out.write(kPad, static_cast<std::streamsize>(pad));
    }
    if (!out) raise(ErrorKind::IoError, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) raise(ErrorKind::IoError, "rename to '" + path.string() + "' failed: " + ec.message());
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorKind::IoError, "cannot open '" + path.string() + "'");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (raw.size() < 16) raise(ErrorKind::MalformedHeader, "file shorter than fixed header");
  if (std::memcmp(raw.data(), kMagic, 8) != 0) raise(ErrorKind::MalformedHeader, "bad magic");
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i)
    header_len |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(raw[8 + i])) << (8 * i);
  if (header_len > raw.size() - 16)
    raise(ErrorKind::MalformedHeader, "declared header length exceeds file size");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(raw.begin() + 16, raw.begin() + 16 + header_len);
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorKind::MalformedHeader, std::string("header parse failed: ") + e.what());
  }
  if (!header.is_object()) raise(ErrorKind::MalformedHeader, "header is not a map");

  const std::size_t payload_base = 16 + header_len;
  const std::size_t payload_size = raw.size() - payload_base;

  std::map<std::string, Tensor> tensors;
  std::size_t watermark = 0;  // ends of previously accepted blobs (name-sorted order)
  for (const auto& [name, meta] : header.items()) {
    if (name.empty() || name.size() > 256) raise(ErrorKind::MalformedHeader, "invalid name");
    if (!meta.is_object() || !meta.contains("dtype") || !meta.contains("shape") ||
        !meta.contains("offset") || !meta.contains("nbytes"))
      raise(ErrorKind::MalformedHeader, "entry '" + name + "' missing fields");

    Tensor t;
    try {
      t.dtype = dtype_from_tag(meta.at("dtype").get<std::string>());
      t.shape = meta.at("shape").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception&) {
      raise(ErrorKind::MalformedHeader, "entry '" + name + "' has malformed fields");
    }
    std::uint64_t offset, nbytes;
    try {
      offset = meta.at("offset").get<std::uint64_t>();
      nbytes = meta.at("nbytes").get<std::uint64_t>();
    } catch (const nlohmann::json::exception&) {
      raise(ErrorKind::MalformedHeader, "entry '" + name + "' has malformed extents");
    }
    if (nbytes != t.element_count() * dtype_size(t.dtype))
      raise(ErrorKind::MalformedHeader, "entry '" + name + "' length does not match shape");
    if (offset % kAlign != 0)
      raise(ErrorKind::MalformedHeader, "entry '" + name + "' offset not 8-byte aligned");
    if (offset < watermark)
      raise(ErrorKind::MalformedHeader, "entry '" + name + "' overlaps a previous entry");
    if (offset > payload_size || nbytes > payload_size - offset)
      raise(ErrorKind::TruncatedPayload, "entry '" + name + "' extends past end of file");
    watermark = offset + nbytes;

    t.bytes.assign(raw.begin() + static_cast<std::ptrdiff_t>(payload_base + offset),
                   raw.begin() + static_cast<std::ptrdiff_t>(payload_base + offset + nbytes));
    tensors.emplace(name, std::move(t));
  }
  return TensorArchive(std::move(tensors));
}

}  // namespace osaq
