#include "gausscount/io.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace gausscount {

namespace {

constexpr std::size_t kMagicSize = 16;
constexpr char kMagic[] = "DMAPf32\n";  // 8 chars, zero padded to 16 bytes

void push_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

std::uint32_t read_u32_le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::string annotations_to_csv(const AnnotationGroups& groups) {
  std::string out = "image_id,x,y\n";
  for (const auto& [id, points] : groups) {
    for (const Point& p : points) {
      out += id;
      out += ',';
      out += format_sig9(p.x);
      out += ',';
      out += format_sig9(p.y);
      out += '\n';
    }
  }
  return out;
}

AnnotationGroups annotations_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) {
    throw IoError("annotations CSV is empty");
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "image_id,x,y") {
    throw IoError("annotations CSV header must be 'image_id,x,y', got '" +
                  line + "'");
  }

  AnnotationGroups groups;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t c1 = line.find(',');
    const std::size_t c2 = c1 == std::string::npos
                               ? std::string::npos
                               : line.find(',', c1 + 1);
    if (c2 == std::string::npos) {
      throw IoError("annotations CSV row " + std::to_string(row) +
                    " needs three columns");
    }
    const std::string id = line.substr(0, c1);
    Point p;
    try {
      p.x = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
      p.y = std::stod(line.substr(c2 + 1));
    } catch (const std::exception&) {
      throw IoError("annotations CSV row " + std::to_string(row) +
                    " has non-numeric coordinates");
    }
    if (groups.empty() || groups.back().first != id) {
      // New group unless the id matches an existing one out of order.
      bool appended = false;
      for (auto& [gid, pts] : groups) {
        if (gid == id) {
          pts.push_back(p);
          appended = true;
          break;
        }
      }
      if (!appended) {
        groups.emplace_back(id, std::vector<Point>{p});
      }
    } else {
      groups.back().second.push_back(p);
    }
  }
  return groups;
}

std::vector<std::uint8_t> dmap_encode(const DensityMap& map) {
  if (map.height < 1 || map.width < 1 ||
      map.values.size() != static_cast<std::size_t>(map.height) * map.width) {
    throw IoError("cannot encode a malformed density map");
  }
  std::vector<std::uint8_t> out;
  out.reserve(kMagicSize + 8 + map.values.size() * 4);
  out.insert(out.end(), kMagic, kMagic + 8);
  out.insert(out.end(), kMagicSize - 8, 0);
  push_u32_le(out, static_cast<std::uint32_t>(map.height));
  push_u32_le(out, static_cast<std::uint32_t>(map.width));
  for (double v : map.values) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    push_u32_le(out, bits);
  }
  return out;
}

DensityMap dmap_decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kMagicSize + 8) {
    throw IoError("DMAP data truncated before header end");
  }
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw IoError("DMAP magic mismatch");
  }
  DensityMap map;
  map.height = static_cast<int>(read_u32_le(bytes.data() + kMagicSize));
  map.width = static_cast<int>(read_u32_le(bytes.data() + kMagicSize + 4));
  if (map.height < 1 || map.width < 1) {
    throw IoError("DMAP header has non-positive dimensions");
  }
  const std::size_t count =
      static_cast<std::size_t>(map.height) * map.width;
  if (bytes.size() != kMagicSize + 8 + count * 4) {
    throw IoError("DMAP payload size disagrees with its header");
  }
  map.values.resize(count);
  const std::uint8_t* p = bytes.data() + kMagicSize + 8;
  for (std::size_t i = 0; i < count; ++i, p += 4) {
    map.values[i] = static_cast<double>(
        std::bit_cast<float>(read_u32_le(p)));
  }
  return map;
}

std::vector<std::uint8_t> pgm_encode(const PgmImage& image) {
  if (image.width < 1 || image.height < 1 ||
      image.pixels.size() !=
          static_cast<std::size_t>(image.width) * image.height) {
    throw IoError("cannot encode a malformed PGM image");
  }
  std::string header = "P5\n" + std::to_string(image.width) + " " +
                       std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  ensure_parent_dir(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot open '" + path + "' for writing");
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw IoError("write to '" + path + "' failed");
  }
}

void write_file(const std::string& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open '" + path + "' for reading");
  }
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

std::string read_text_file(const std::string& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void ensure_parent_dir(const std::string& path) {
  const std::filesystem::path parent =
      std::filesystem::path(path).parent_path();
  if (!parent.empty()) {
    std::filesystem::create_directories(parent);
  }
}

std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    hash ^= b;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

}  // namespace gausscount
