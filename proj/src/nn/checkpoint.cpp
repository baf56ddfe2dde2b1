#include "normshape/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "normshape/error.hpp"

namespace normshape {

namespace {

std::size_t product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e);
  return n;
}

}  // namespace

void save_checkpoint(const std::vector<NamedTensor>& tensors, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  out << "NSCKPT 1\n" << tensors.size() << '\n';
  for (const NamedTensor& t : tensors) {
    if (t.name.empty() || t.name.find_first_of(" \t\n") != std::string::npos) {
      throw Error(ErrorKind::InvalidArgument, "tensor name must be a non-empty token");
    }
    if (product(t.shape) != t.data.size()) {
      throw Error(ErrorKind::SizeMismatch, "tensor " + t.name + " data does not match its shape");
    }
    out << t.name << ' ' << t.shape.size();
    for (int e : t.shape) out << ' ' << e;
    out << '\n';
  }
  out << "BINARY\n";
  for (const NamedTensor& t : tensors) {
    std::vector<char> bytes(t.data.size() * 4);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(t.data[i]);
      for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw Error(ErrorKind::IoFailure, "write failed for " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  auto fail = [&](const std::string& why) {
    throw Error(ErrorKind::MalformedHeader, path.string() + ": " + why);
  };
  std::string line;
  if (!std::getline(in, line) || line != "NSCKPT 1") fail("bad magic");
  if (!std::getline(in, line)) fail("missing tensor count");
  std::size_t count = 0;
  {
    std::istringstream ss(line);
    if (!(ss >> count)) fail("bad tensor count");
  }
  std::vector<NamedTensor> tensors(count);
  for (NamedTensor& t : tensors) {
    if (!std::getline(in, line)) fail("truncated header");
    std::istringstream ss(line);
    std::size_t rank = 0;
    if (!(ss >> t.name >> rank)) fail("bad tensor line");
    t.shape.resize(rank);
    for (int& e : t.shape) {
      if (!(ss >> e) || e <= 0) fail("bad extent for " + t.name);
    }
  }
  if (!std::getline(in, line) || line != "BINARY") fail("missing BINARY marker");
  for (NamedTensor& t : tensors) {
    std::vector<char> bytes(product(t.shape) * 4);
    if (!in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
      throw Error(ErrorKind::SizeMismatch, path.string() + ": payload too short for " + t.name);
    }
    t.data.resize(bytes.size() / 4);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
      }
      t.data[i] = std::bit_cast<float>(bits);
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorKind::SizeMismatch, path.string() + ": trailing bytes after payload");
  }
  return tensors;
}

const NamedTensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return t;
  }
  throw Error(ErrorKind::InvalidArgument, "tensor '" + name + "' not found");
}

}  // namespace normshape
