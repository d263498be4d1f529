#pragma once

// Self-describing checkpoint container: a "FCKPT1" header, ordered string
// metadata and named float32 tensors. Denoiser weights, teacher training
// state and distillation state are all stored in this container.

#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "flashclear/model.hpp"
#include "flashclear/optim.hpp"

namespace flashclear {

struct Checkpoint {
  std::string kind;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  const Tensor<float>* find_tensor(const std::string& name) const;
};

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// UNetConfig and codec mode <-> metadata entries prefixed "unet.".
void put_config(Checkpoint& ckpt, const UNetConfig& cfg, CodecMode codec = CodecMode::kIdentity);
UNetConfig get_config(const Checkpoint& ckpt);
CodecMode get_codec(const Checkpoint& ckpt);

// Every parameter of `store` as tensor "<prefix><name>".
void put_params(Checkpoint& ckpt, const nn::ParamStore<float>& store, const std::string& prefix);
// Restores every parameter of `store`; throws FormatError if any is missing.
void get_params(const Checkpoint& ckpt, nn::ParamStore<float>& store, const std::string& prefix);

void put_optimizer(Checkpoint& ckpt, const AdamW& opt, const std::string& prefix);
void get_optimizer(const Checkpoint& ckpt, AdamW& opt, const std::string& prefix);

void save_denoiser(const Denoiser<float>& model, const std::filesystem::path& path);
std::unique_ptr<Denoiser<float>> load_denoiser(const std::filesystem::path& path);
// Accepts a plain denoiser checkpoint or a training-state checkpoint.
std::unique_ptr<Denoiser<float>> denoiser_from_checkpoint(const Checkpoint& ckpt);

}  // namespace flashclear
