#pragma once

#include "fltlm/datagen.hpp"
#include "fltlm/model.hpp"
#include "fltlm/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace fltlm {

/// Resolved configuration of one command: model, data and train sections
/// plus output locations. Serialised as JSON and embedded in every artifact.
struct RunConfig {
  ModelConfig model;
  GenConfig data;
  TrainConfig train;
  std::filesystem::path data_dir = "data";
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::filesystem::path report_dir = "reports";
  std::uint64_t seed = 1;
};

nlohmann::ordered_json to_json(const ModelConfig& c);
nlohmann::ordered_json to_json(const GenConfig& c);
nlohmann::ordered_json to_json(const TrainConfig& c);
nlohmann::ordered_json to_json(const RunConfig& c);

/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
GenConfig gen_config_from_json(const nlohmann::json& j, GenConfig base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});

RunConfig load_run_config(const std::filesystem::path& path);
/// One-line JSON, stable key order.
std::string dump_compact(const RunConfig& c);

}  // namespace fltlm
