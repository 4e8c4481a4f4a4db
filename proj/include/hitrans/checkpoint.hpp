#pragma once

#include "hitrans/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace hitrans {

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Decoded checkpoint file: a JSON header plus named float32 tensors.
///
/// On disk: "HITRANS1", u32 header length, header JSON, u32 tensor count, then per tensor
/// (u32 name length, name, u32 rank, u64 dims, float32 data) in name order, and a trailing
/// FNV-1a 64 checksum of everything before it. All integers little-endian.
struct CheckpointData {
    nlohmann::json header = nlohmann::json::object();
    std::map<std::string, Tensor<float>> tensors;
};

std::string encode_checkpoint(const CheckpointData& data);
/// Throws CheckpointError on bad magic, truncation, checksum mismatch or malformed content.
CheckpointData decode_checkpoint(const std::string& bytes);

/// Writes to a temporary sibling and renames, so a failed write never leaves a partial file.
void write_checkpoint_file(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint_file(const std::filesystem::path& path);

/// Header keys "model_config" and "variant", one tensor per parameter (running statistics included).
template <typename Scalar>
CheckpointData model_checkpoint(const Model<Scalar>& model);

/// Rebuilds the model described by the header and copies every parameter in.
/// Missing or wrong-shaped parameters are reported together.
template <typename Scalar>
Model<Scalar> model_from_checkpoint(const CheckpointData& data);

template <typename Scalar>
void save_model(const Model<Scalar>& model, const std::filesystem::path& path);
template <typename Scalar>
Model<Scalar> load_model(const std::filesystem::path& path);

/// Replaces backbone parameters with those stored in `path`; other components are untouched.
template <typename Scalar>
void load_backbone_weights(Model<Scalar>& model, const std::filesystem::path& path);

}  // namespace hitrans
