#pragma once

#include <initializer_list>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fmn/dataset.hpp"
#include "fmn/errors.hpp"
#include "fmn/eval.hpp"
#include "fmn/network.hpp"
#include "fmn/rerank.hpp"
#include "fmn/training.hpp"

namespace fmn::json {

using Json = nlohmann::ordered_json;

/// Parses UTF-8 JSON. Syntax errors become ParseError("source:line:column: ...").
Json parse(std::string_view text, const std::string& source);

/// 1-based line and column of a byte offset.
std::pair<std::size_t, std::size_t> line_column(std::string_view text, std::size_t offset);

/// Throws ParseError when `obj` is not an object or holds a key outside
/// `allowed`. `path` prefixes field names in messages ("train.momentum").
void check_object(const Json& obj, const std::string& path, std::initializer_list<std::string_view> allowed);

std::string join(const std::string& path, std::string_view key);

template <typename T>
struct is_vector : std::false_type {};
template <typename T>
struct is_vector<std::vector<T>> : std::true_type {};

template <typename T>
bool holds(const Json& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v.is_boolean();
  } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
    return v.is_number_unsigned();
  } else if constexpr (std::is_integral_v<T>) {
    return v.is_number_integer();
  } else if constexpr (std::is_floating_point_v<T>) {
    return v.is_number();
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v.is_string();
  } else if constexpr (is_vector<T>::value) {
    if (!v.is_array()) return false;
    for (const Json& e : v) {
      if (!holds<typename T::value_type>(e)) return false;
    }
    return true;
  } else {
    static_assert(sizeof(T) == 0, "unsupported field type");
  }
}

/// Typed read; ParseError names `path` on a type mismatch.
template <typename T>
T as(const Json& value, const std::string& path) {
  if (!holds<T>(value)) throw ParseError(path + ": unexpected value " + value.dump());
  return value.get<T>();
}

/// Reads obj[key] into `target` when present.
template <typename T>
void read_optional(const Json& obj, std::string_view key, const std::string& path, T& target) {
  const auto it = obj.find(std::string(key));
  if (it != obj.end()) target = as<T>(*it, join(path, key));
}

template <typename T>
T read_required(const Json& obj, std::string_view key, const std::string& path) {
  const auto it = obj.find(std::string(key));
  if (it == obj.end()) throw ParseError(join(path, key) + ": missing required field");
  return as<T>(*it, join(path, key));
}

Json to_json(const NetworkConfig& c);
NetworkConfig network_config_from_json(const Json& j, const std::string& path = "network");

Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const Json& j, const std::string& path = "train");

Json to_json(const ReRankConfig& c);
ReRankConfig rerank_config_from_json(const Json& j, const std::string& path = "rerank");

Json to_json(const EvalProtocol& c);
EvalProtocol eval_protocol_from_json(const Json& j, const std::string& path = "eval");

Json to_json(const SyntheticConfig& c);
SyntheticConfig synthetic_config_from_json(const Json& j, const std::string& path = "dataset");

}  // namespace fmn::json
