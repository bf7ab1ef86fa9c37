// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tsmoe/data.hpp"
#include "tsmoe/evaluation.hpp"
#include "tsmoe/model.hpp"
#include "tsmoe/moe.hpp"
#include "tsmoe/training.hpp"

namespace tsmoe {

using Json = nlohmann::json;

/// Non-negative JSON integer, whether stored signed or unsigned.
bool is_count(const Json& v) noexcept;

/// Throws ConfigError naming the first key of `obj` not in `allowed`.
void check_keys(const Json& obj, std::initializer_list<std::string_view> allowed, std::string_view where);

/// Serializers emit every field. Parsers start from `base` and override the keys
/// present, rejecting unknown keys and ill-typed values with ConfigError.
Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j, ModelConfig base = {});

/// Includes the model block under "model".
Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const Json& j, TrainConfig base = {});

Json to_json(const SyntheticSpec& s);
SyntheticSpec synthetic_spec_from_json(const Json& j, SyntheticSpec base = {});

/// Training data: JSON-lines files and/or a synthetic corpus; `holdout_tail`
/// values are cut from the end of every series (the evaluation region).
struct DataSource {
    std::vector<std::string> paths;
    bool synthetic = false;
    SyntheticSpec synthetic_spec = default_synthetic_spec();
    std::size_t holdout_tail = 0;
};

Json to_json(const DataSource& d);
DataSource data_source_from_json(const Json& j, DataSource base = {});

/// All records of the source, in file order then generation order.
std::vector<TimeSeriesRecord> load_records(const DataSource& source);
/// Records with the held-out tail removed.
std::vector<TimeSeriesRecord> load_training_records(const DataSource& source);

/// Evaluation datasets: one per freq tag of the source, season per tag
/// (defaults to `default_season`; synthetic groups use the lcm of their periods).
struct EvalDatasetSpec {
    DataSource data;
    std::map<std::string, std::size_t> seasons; // freq tag -> season
    std::size_t default_season = 1;
};

Json to_json(const EvalDatasetSpec& e);
EvalDatasetSpec eval_dataset_spec_from_json(const Json& j, EvalDatasetSpec base = {});
std::vector<EvalDataset> build_eval_datasets(const EvalDatasetSpec& spec);

Json to_json(const Protocol& p);
Protocol protocol_from_json(const Json& j, Protocol base = {});

/// Reads a JSON file; IoError if unreadable, ConfigError if malformed.
Json read_json_file(const std::string& path);

} // namespace tsmoe
