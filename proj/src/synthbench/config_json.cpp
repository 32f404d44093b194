#include "ltn/synthbench/config_json.hpp"

#include <vector>

namespace ltn {

void to_json(nlohmann::json& j, FusionMode m) { j = to_string(m); }

void from_json(const nlohmann::json& j, FusionMode& m) {
  if (!j.is_string()) throw ConfigError("fusion mode must be a string");
  m = fusion_mode_from_string(j.get<std::string>());
}

void to_json(nlohmann::json& j, EarlyFusionMethod m) { j = to_string(m); }

void from_json(const nlohmann::json& j, EarlyFusionMethod& m) {
  if (!j.is_string()) throw ConfigError("fusion method must be a string");
  m = fusion_method_from_string(j.get<std::string>());
}

}  // namespace ltn

namespace ltn::synth {

namespace {

bool compatible(const nlohmann::json& base, const nlohmann::json& value) {
  if (base.is_number_integer()) return value.is_number_integer();
  if (base.is_number()) return value.is_number();
  return base.type() == value.type();
}

std::string type_label(const nlohmann::json& v) {
  if (v.is_number_integer()) return "an integer";
  if (v.is_number()) return "a number";
  return std::string("a ") + v.type_name();
}

}  // namespace

void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("configuration " + (prefix.empty() ? "document" : "'" + prefix + "'") +
                                            " must be a JSON object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown configuration key '" + path + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, path);
    } else if (!compatible(slot, value)) {
      throw ConfigError("configuration key '" + path + "' expects " + type_label(slot) + ", got " +
                        type_label(value));
    } else if (slot.is_array() && !slot.empty() && !value.empty()) {
      for (const auto& element : value) {
        if (!compatible(slot.front(), element)) {
          throw ConfigError("configuration key '" + path + "' expects elements of " + type_label(slot.front()));
        }
      }
      slot = value;
    } else {
      slot = value;
    }
  }
}

nlohmann::json parse_override_value(const std::string& text) {
  const auto parsed = nlohmann::json::parse(text, nullptr, false);
  if (parsed.is_discarded()) return text;
  return parsed;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  nlohmann::json patch = parse_override_value(assignment.substr(eq + 1));
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    parts.push_back(key.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
    if (parts.back().empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, std::move(patch)}};
  merge_strict(doc, patch);
}

}  // namespace ltn::synth
