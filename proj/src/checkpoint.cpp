#include "selat/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "selat/errors.hpp"

namespace selat::io {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

void put_string(std::string& out, const std::string& s) {
  put_u64(out, s.size());
  out += s;
}

class Reader {
 public:
  Reader(std::string_view bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

  std::uint64_t u64() {
    std::uint64_t v;
    std::memcpy(&v, take(8).data(), 8);
    return v;
  }

  std::string string() {
    const auto n = u64();
    return std::string(take(n));
  }

  void floats(std::vector<float>& out, std::uint64_t count) {
    if (count > remaining() / 4) truncated(count * 4);
    out.resize(count);
    std::memcpy(out.data(), take(count * 4).data(), count * 4);
  }

  std::string_view take(std::uint64_t n) {
    if (n > remaining()) truncated(n);
    auto view = bytes_.substr(pos_, n);
    pos_ += n;
    return view;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  [[noreturn]] void truncated(std::uint64_t wanted) const {
    throw FormatError(origin_ + ": truncated container (needed " + std::to_string(wanted) + " bytes at offset " +
                      std::to_string(pos_) + ", " + std::to_string(remaining()) + " left)");
  }

  std::string_view bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

const ContainerEntry& Container::entry(const std::string& entry_name) const {
  for (const auto& e : entries) {
    if (e.name == entry_name) return e;
  }
  throw FormatError("container '" + name + "' has no entry '" + entry_name + "'");
}

std::string encode_container(const Container& c) {
  std::string out(kContainerMagic);
  put_string(out, c.name);
  put_u64(out, c.entries.size());
  for (const auto& e : c.entries) {
    std::uint64_t count = 1;
    for (auto d : e.dims) count *= d;
    if (count != e.values.size()) {
      throw DimensionError("container entry '" + e.name + "': dims do not match value count");
    }
    put_string(out, e.name);
    put_u64(out, e.dims.size());
    for (auto d : e.dims) put_u64(out, d);
    out.append(reinterpret_cast<const char*>(e.values.data()), e.values.size() * sizeof(float));
  }
  return out;
}

Container decode_container(std::string_view bytes, const std::string& origin) {
  Reader r(bytes, origin);
  const auto magic = r.take(kContainerMagic.size());
  if (magic != kContainerMagic) {
    throw FormatError(origin + ": bad magic '" + std::string(magic) + "', expected SELAT1");
  }
  Container c;
  c.name = r.string();
  const auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    ContainerEntry e;
    e.name = r.string();
    const auto rank = r.u64();
    std::uint64_t total = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      e.dims.push_back(r.u64());
      total *= e.dims.back();
    }
    r.floats(e.values, total);
    c.entries.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw FormatError(origin + ": trailing bytes after last entry");
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes, path.string());
}

template <typename T>
Container to_container(const nn::Model<T>& model) {
  Container c;
  c.name = model.name();
  for (const auto& p : model.params()) {
    ContainerEntry e;
    e.name = p.name;
    for (auto d : p.value.shape()) e.dims.push_back(d);
    e.values.assign(p.value.data().begin(), p.value.data().end());
    c.entries.push_back(std::move(e));
  }
  return c;
}

template <typename T>
nn::Model<T> model_from_container(const Container& c) {
  auto model = nn::build_model<T>(nn::ModelSpec::parse(c.name), 0);
  if (model.params().size() != c.entries.size()) {
    throw FormatError("checkpoint '" + c.name + "': expected " + std::to_string(model.params().size()) +
                      " parameters, found " + std::to_string(c.entries.size()));
  }
  for (auto& p : model.params()) {
    const auto& e = c.entry(p.name);
    ad::Shape shape(e.dims.begin(), e.dims.end());
    if (shape != p.value.shape()) {
      throw FormatError("checkpoint parameter '" + p.name + "': shape " + ad::to_string(shape) + ", model expects " +
                        ad::to_string(p.value.shape()));
    }
    auto dst = p.value.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e.values[i]);
  }
  return model;
}

template Container to_container(const nn::Model<float>&);
template Container to_container(const nn::Model<double>&);
template nn::Model<float> model_from_container<float>(const Container&);
template nn::Model<double> model_from_container<double>(const Container&);

}  // namespace selat::io
