#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace normshape {

/// Named float32 tensor as stored in NSCKPT files.
struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

/// NSCKPT 1 layout:
///   "NSCKPT 1\n"
///   "<count>\n"
///   one line per tensor: "<name> <rank> <d0> ... <d_rank-1>\n"
///   "BINARY\n"
///   little-endian float32 payloads, concatenated in header order.
void save_checkpoint(const std::vector<NamedTensor>& tensors, const std::filesystem::path& path);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Looks a tensor up by name; throws InvalidArgument when absent.
const NamedTensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

}  // namespace normshape
