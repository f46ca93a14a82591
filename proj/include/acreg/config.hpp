#pragma once

// JSON run configuration. Every key is optional; an unknown key, a wrong
// type or an invalid value is rejected.

#include <acreg/autocontext.hpp>
#include <acreg/errors.hpp>
#include <acreg/optimizer.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

namespace acreg {

struct RunConfig {
  AutoContextConfig registration;
  std::uint64_t seed = 0;
};

namespace detail {

inline const std::set<std::string>& config_keys() {
  static const std::set<std::string> keys{"learning_rate", "max_iterations", "pyramid_factors", "squaring_steps",
                                          "ncc_window",    "lambda_sim",     "lambda_v",        "lambda_j",
                                          "sigma_soft",    "n_autocontext",  "seed"};
  return keys;
}

template <class T>
T config_value(const nlohmann::json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InvalidInputError("config: key \"" + key + "\" has the wrong type");
  }
}

inline int config_int(const nlohmann::json& j, const std::string& key) {
  if (!j.at(key).is_number_integer()) throw InvalidInputError("config: key \"" + key + "\" must be an integer");
  return config_value<int>(j, key);
}

inline double config_real(const nlohmann::json& j, const std::string& key) {
  if (!j.at(key).is_number()) throw InvalidInputError("config: key \"" + key + "\" must be a number");
  return config_value<double>(j, key);
}

} // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidInputError("config: top level must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!detail::config_keys().count(key)) throw InvalidInputError("config: unknown key \"" + key + "\"");

  RunConfig rc;
  OptimizerConfig& o = rc.registration.optimizer;
  if (j.contains("learning_rate")) o.learning_rate = detail::config_real(j, "learning_rate");
  if (j.contains("max_iterations")) o.max_iterations = detail::config_int(j, "max_iterations");
  if (j.contains("pyramid_factors")) {
    const auto& p = j.at("pyramid_factors");
    if (!p.is_array() || p.empty()) throw InvalidInputError("config: pyramid_factors must be a non-empty array");
    o.pyramid_factors.clear();
    for (const auto& f : p) {
      if (!f.is_number_integer()) throw InvalidInputError("config: pyramid_factors must hold integers");
      o.pyramid_factors.push_back(f.get<int>());
    }
  }
  if (j.contains("squaring_steps")) o.squaring_steps = detail::config_int(j, "squaring_steps");
  if (j.contains("ncc_window")) o.ncc_window = detail::config_int(j, "ncc_window");
  if (j.contains("lambda_sim")) o.weights.lambda_sim = detail::config_real(j, "lambda_sim");
  if (j.contains("lambda_v")) o.weights.lambda_v = detail::config_real(j, "lambda_v");
  if (j.contains("lambda_j")) o.weights.lambda_j = detail::config_real(j, "lambda_j");
  if (j.contains("sigma_soft")) rc.registration.sigma_soft = detail::config_real(j, "sigma_soft");
  if (j.contains("n_autocontext")) rc.registration.n_iterations = detail::config_int(j, "n_autocontext");
  if (j.contains("seed")) {
    const auto& s = j.at("seed");
    if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<std::int64_t>() >= 0))
      throw InvalidInputError("config: seed must be a non-negative integer");
    rc.seed = s.get<std::uint64_t>();
  }
  rc.registration.validate();
  return rc;
}

inline RunConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInputError(std::string("config: ") + e.what());
  }
  return parse_config(j);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open config");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

inline nlohmann::json to_json(const RunConfig& rc) {
  const OptimizerConfig& o = rc.registration.optimizer;
  return {{"learning_rate", o.learning_rate},       {"max_iterations", o.max_iterations},
          {"pyramid_factors", o.pyramid_factors},   {"squaring_steps", o.squaring_steps},
          {"ncc_window", o.ncc_window},             {"lambda_sim", o.weights.lambda_sim},
          {"lambda_v", o.weights.lambda_v},         {"lambda_j", o.weights.lambda_j},
          {"sigma_soft", rc.registration.sigma_soft}, {"n_autocontext", rc.registration.n_iterations},
          {"seed", rc.seed}};
}

} // namespace acreg
