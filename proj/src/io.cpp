// Copyright 2026 The AnoRefiner Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "anorefiner/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "anorefiner/errors.hpp"

namespace anorefiner {
namespace {

static_assert(std::endian::native == std::endian::little, "ANR1 I/O assumes a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[off + i]) << (8 * i);
  return v;
}

std::uint8_t quantise(float v) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(255.0 * c + 0.5));
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.rank() > kMaxTensorRank) throw FormatError("ANR1: rank exceeds 8");
  std::vector<std::uint8_t> out = {'A', 'N', 'R', '1'};
  out.reserve(8 + 4 * t.rank() + 4 * t.size());
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.dims()) put_u32(out, static_cast<std::uint32_t>(d));
  const std::size_t off = out.size();
  out.resize(off + 4 * t.size());
  std::memcpy(out.data() + off, t.data().data(), 4 * t.size());
  return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "ANR1", 4) != 0) {
    throw FormatError("ANR1: bad magic at offset 0");
  }
  if (bytes.size() < 8) throw FormatError("ANR1: truncated rank at offset 4");
  const std::uint32_t rank = get_u32(bytes, 4);
  if (rank == 0 || rank > kMaxTensorRank) {
    throw FormatError("ANR1: rank " + std::to_string(rank) + " out of range [1,8] at offset 4");
  }
  Shape dims(rank);
  std::size_t off = 8;
  for (std::uint32_t i = 0; i < rank; ++i, off += 4) {
    if (bytes.size() < off + 4) throw FormatError("ANR1: truncated dims at offset " + std::to_string(off));
    dims[i] = get_u32(bytes, off);
    if (dims[i] == 0) throw FormatError("ANR1: zero dim at offset " + std::to_string(off));
  }
  const std::size_t n = shape_size(dims);
  if (bytes.size() < off + 4 * n) throw FormatError("ANR1: truncated payload at offset " + std::to_string(off));
  if (bytes.size() > off + 4 * n) {
    throw FormatError("ANR1: trailing bytes at offset " + std::to_string(off + 4 * n));
  }
  std::vector<float> values(n);
  std::memcpy(values.data(), bytes.data() + off, 4 * n);
  return Tensor(std::move(dims), std::move(values));
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text(const fs::path& path) {
  const auto b = read_file(path);
  return {b.begin(), b.end()};
}

void write_tensor(const fs::path& path, const Tensor& t) { write_file(path, encode_tensor(t)); }

Tensor read_tensor(const fs::path& path) {
  try {
    return decode_tensor(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_pnm(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(2) != 1 && image.dim(2) != 3)) {
    throw ShapeError("PNM: image must be [H,W,1] or [H,W,3], got " + shape_string(image.dims()));
  }
  const std::string header = std::string(image.dim(2) == 1 ? "P5" : "P6") + "\n" + std::to_string(image.dim(1)) +
                             " " + std::to_string(image.dim(0)) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + image.size());
  for (float v : image.data()) out.push_back(quantise(v));
  return out;
}

Tensor decode_pnm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* field) {
    skip_space();
    const std::size_t start = pos;
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw FormatError(std::string("PNM: missing ") + field + " at offset " + std::to_string(start));
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError("PNM: bad magic at offset 0");
  }
  const std::size_t ch = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  const long w = read_int("width");
  const long h = read_int("height");
  const long maxval = read_int("maxval");
  if (w <= 0 || h <= 0) throw FormatError("PNM: non-positive dimensions");
  if (maxval <= 0 || maxval > 255) throw FormatError("PNM: only 8-bit maxval is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("PNM: malformed header");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(w * h) * ch;
  if (bytes.size() < pos + n) throw FormatError("PNM: truncated payload at offset " + std::to_string(pos));
  Tensor img(Shape{static_cast<std::size_t>(h), static_cast<std::size_t>(w), ch});
  for (std::size_t i = 0; i < n; ++i) img[i] = static_cast<float>(bytes[pos + i]) / static_cast<float>(maxval);
  return img;
}

Tensor read_pnm(const fs::path& path) {
  try {
    return decode_pnm(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_pnm(const fs::path& path, const Tensor& image) { write_file(path, encode_pnm(image)); }

void export_heatmap(const Tensor& map, const fs::path& path) {
  if (map.rank() != 3 || map.dim(2) != 1) throw ShapeError("export_heatmap: map must be [H,W,1]");
  write_pnm(path, map);
}

fs::path Manifest::resolve(const std::string& p) const {
  const fs::path q(p);
  return q.is_absolute() ? q : base_dir / q;
}

std::vector<std::string> Manifest::categories() const {
  std::vector<std::string> out;
  for (const auto& r : records) {
    if (std::find(out.begin(), out.end(), r.category) == out.end()) out.push_back(r.category);
  }
  return out;
}

std::string manifest_record_json(const ManifestRecord& r) {
  nlohmann::ordered_json j;
  j["image_id"] = r.image_id;
  j["path"] = r.path;
  j["category"] = r.category;
  if (r.gt_label) j["gt_label"] = *r.gt_label;
  if (r.gt_mask_path) j["gt_mask_path"] = *r.gt_mask_path;
  if (r.feature_path) j["feature_path"] = *r.feature_path;
  if (r.anomaly_path) j["anomaly_path"] = *r.anomaly_path;
  return j.dump();
}

Manifest read_manifest(const fs::path& path) {
  std::istringstream in(read_text(path));
  Manifest m;
  m.base_dir = path.parent_path();
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    ManifestRecord r;
    try {
      r.image_id = j.at("image_id").get<std::string>();
      r.path = j.at("path").get<std::string>();
      r.category = j.value("category", std::string("default"));
      if (j.contains("gt_mask_path") && !j["gt_mask_path"].is_null()) r.gt_mask_path = j["gt_mask_path"].get<std::string>();
      if (j.contains("gt_label") && !j["gt_label"].is_null()) r.gt_label = j["gt_label"].get<int>();
      if (j.contains("feature_path")) r.feature_path = j["feature_path"].get<std::string>();
      if (j.contains("anomaly_path")) r.anomaly_path = j["anomaly_path"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    if (r.gt_label && *r.gt_label != 0 && *r.gt_label != 1) throw FormatError(where + ": gt_label must be 0 or 1");
    if (!seen.insert(r.image_id).second) throw FormatError(where + ": duplicate image_id " + r.image_id);
    m.records.push_back(std::move(r));
  }
  return m;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  std::string text;
  for (const auto& r : manifest.records) text += manifest_record_json(r) + "\n";
  write_text(path, text);
}

}  // namespace anorefiner
