#include "ltn/synthbench/dataset_io.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "ltn/synthbench/config_json.hpp"

namespace ltn::synth {

namespace fs = std::filesystem;

std::string encode_pgm(const GrayImage& image) {
  std::string out = fmt::format("P5\n{} {}\n255\n", image.width, image.height);
  out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
  return out;
}

namespace {

// Skips whitespace and '#' comments, then reads one non-negative decimal field.
int pgm_field(const std::string& bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    const char c = bytes[pos];
    if (c == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      ++pos;
    } else {
      break;
    }
  }
  long value = 0;
  const std::size_t start = pos;
  while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9' && pos - start < 9) {
    value = value * 10 + (bytes[pos] - '0');
    ++pos;
  }
  if (pos == start) throw DataError("malformed PGM header");
  return static_cast<int>(value);
}

}  // namespace

GrayImage decode_pgm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw DataError("not a binary PGM (P5) image");
  std::size_t pos = 2;
  const int width = pgm_field(bytes, pos);
  const int height = pgm_field(bytes, pos);
  const int maxval = pgm_field(bytes, pos);
  if (width <= 0 || height <= 0) throw DataError("PGM image has an empty extent");
  if (maxval != 255) throw DataError(fmt::format("PGM maxval {} is not supported (expected 255)", maxval));
  if (pos >= bytes.size() || !(bytes[pos] == ' ' || bytes[pos] == '\t' || bytes[pos] == '\n' || bytes[pos] == '\r')) {
    throw DataError("malformed PGM header");
  }
  ++pos;
  const std::size_t count = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() - pos != count) {
    throw DataError(fmt::format("PGM pixel data has {} bytes, expected {}", bytes.size() - pos, count));
  }
  GrayImage image(height, width);
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(), reinterpret_cast<char*>(image.pixels.data()));
  return image;
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("cannot write " + path.string());
}

void write_pgm(const fs::path& path, const GrayImage& image) { write_text_file(path, encode_pgm(image)); }

GrayImage read_pgm(const fs::path& path) {
  try {
    return decode_pgm(read_text_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

namespace {

std::string image_name(int id) { return fmt::format("images/{:06d}.pgm", id); }

std::vector<AnnotationRecord> records(const std::vector<SyntheticScene>& scenes,
                                      std::vector<BoxSpec> SyntheticScene::*boxes) {
  std::vector<AnnotationRecord> out;
  for (const auto& s : scenes) {
    for (const auto& b : s.*boxes) out.push_back({s.id, b});
  }
  return out;
}

nlohmann::json scene_list(const std::vector<SyntheticScene>& scenes) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : scenes) out.push_back({{"id", s.id}, {"archetype", s.archetype}, {"image", image_name(s.id)}});
  return out;
}

}  // namespace

void save_dataset(const SyntheticDataset& dataset, const SynthConfig& config, std::uint64_t seed, const fs::path& dir) {
  fs::create_directories(dir / "images");
  nlohmann::json manifest{{"schema_version", kDatasetSchemaVersion},
                          {"seed", seed},
                          {"config", config},
                          {"archetypes", dataset.archetypes},
                          {"skipped_placements", dataset.skipped_placements},
                          {"train", scene_list(dataset.train)},
                          {"val", scene_list(dataset.val)}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
  for (const auto* split : {&dataset.train, &dataset.val}) {
    for (const auto& s : *split) write_pgm(dir / image_name(s.id), s.image);
  }
  write_text_file(dir / "train.jsonl", write_annotation_lines(records(dataset.train, &SyntheticScene::annotations)));
  write_text_file(dir / "val.jsonl", write_annotation_lines(records(dataset.val, &SyntheticScene::annotations)));
  auto distractors = records(dataset.train, &SyntheticScene::distractors);
  const auto val_distractors = records(dataset.val, &SyntheticScene::distractors);
  distractors.insert(distractors.end(), val_distractors.begin(), val_distractors.end());
  write_text_file(dir / "distractors.jsonl", write_annotation_lines(distractors));
}

namespace {

void load_split(const nlohmann::json& list, const fs::path& dir, int archetypes, std::map<int, SyntheticScene*>& by_id,
                std::vector<SyntheticScene>& out) {
  for (const auto& entry : list) {
    SyntheticScene s;
    s.id = entry.at("id").get<int>();
    s.archetype = entry.at("archetype").get<int>();
    if (s.archetype < 0 || s.archetype >= archetypes) {
      throw DataError(fmt::format("scene {} refers to unknown archetype {}", s.id, s.archetype));
    }
    s.image = read_pgm(dir / entry.at("image").get<std::string>());
    out.push_back(std::move(s));
  }
  for (auto& s : out) {
    if (!by_id.emplace(s.id, &s).second) throw DataError(fmt::format("scene id {} appears twice", s.id));
  }
}

void attach(const std::vector<AnnotationRecord>& recs, std::map<int, SyntheticScene*>& by_id,
            std::vector<BoxSpec> SyntheticScene::*boxes, const std::string& file) {
  for (const auto& r : recs) {
    const auto it = by_id.find(r.image_id);
    if (it == by_id.end()) throw DataError(fmt::format("{}: record for unknown image {}", file, r.image_id));
    ((*it->second).*boxes).push_back(r.box);
  }
}

}  // namespace

LoadedDataset load_dataset(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw DataError("no dataset manifest at " + manifest_path.string());
  LoadedDataset out;
  try {
    const auto manifest = nlohmann::json::parse(read_text_file(manifest_path));
    const int version = manifest.at("schema_version").get<int>();
    if (version != kDatasetSchemaVersion) {
      throw DataError(fmt::format("dataset schema version {} is not supported (expected {})", version,
                                  kDatasetSchemaVersion));
    }
    out.seed = manifest.at("seed").get<std::uint64_t>();
    out.config = manifest.at("config").get<SynthConfig>();
    out.dataset.archetypes = manifest.at("archetypes").get<std::vector<Archetype>>();
    out.dataset.skipped_placements = manifest.at("skipped_placements").get<int>();
    const int archetypes = static_cast<int>(out.dataset.archetypes.size());
    std::map<int, SyntheticScene*> train_ids, val_ids, all_ids;
    load_split(manifest.at("train"), dir, archetypes, train_ids, out.dataset.train);
    load_split(manifest.at("val"), dir, archetypes, val_ids, out.dataset.val);
    all_ids = train_ids;
    for (const auto& [id, scene] : val_ids) {
      if (!all_ids.emplace(id, scene).second) throw DataError(fmt::format("scene id {} is in both splits", id));
    }
    attach(read_annotation_lines(read_text_file(dir / "train.jsonl")), train_ids, &SyntheticScene::annotations,
           "train.jsonl");
    attach(read_annotation_lines(read_text_file(dir / "val.jsonl")), val_ids, &SyntheticScene::annotations,
           "val.jsonl");
    attach(read_annotation_lines(read_text_file(dir / "distractors.jsonl")), all_ids, &SyntheticScene::distractors,
           "distractors.jsonl");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed dataset manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("dataset manifest: ") + e.what());
  }
  return out;
}

}  // namespace ltn::synth
