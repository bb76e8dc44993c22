#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "guardfs/adversary.hpp"
#include "guardfs/digest.hpp"
#include "guardfs/textio.hpp"

namespace guardfs::adversary {

namespace fs = std::filesystem;

std::vector<SuffixClass> default_suffix_mix() {
  return {
      {".txt", 3.0, EntropyProfile::Low},         {".csv", 1.0, EntropyProfile::Low},
      {".pdf", 1.5, EntropyProfile::Structured}, {".docx", 1.0, EntropyProfile::Structured},
      {".jpg", 2.0, EntropyProfile::High},        {".zip", 1.0, EntropyProfile::High},
  };
}

void CorpusSpec::validate() const {
  if (file_count > 0 && suffixes.empty()) throw std::invalid_argument("corpus needs suffixes");
  for (const auto& s : suffixes) {
    if (!(s.weight > 0)) throw std::invalid_argument("suffix weight must be positive");
  }
  if (file_count > 0 && total_bytes < file_count) {
    throw std::invalid_argument("corpus total_bytes must allow one byte per file");
  }
}

namespace {

constexpr std::string_view kWords[] = {
    "the",     "report",  "quarterly", "budget", "meeting", "notes",   "project", "review",
    "account", "invoice", "customer",  "order",  "status",  "update",  "team",    "plan",
    "and",     "for",     "with",      "from",   "this",    "that",    "will",    "should",
    "data",    "system",  "server",    "backup", "policy",  "summary", "draft",   "final",
    "north",   "south",   "region",    "sales",  "total",   "amount",  "date",    "time",
    "please",  "attach",  "document",  "table",  "figure",  "section", "result",  "value",
};

void fill_text(std::mt19937_64& rng, std::vector<std::uint8_t>& out, std::size_t size) {
  std::uniform_int_distribution<std::size_t> word(0, std::size(kWords) - 1);
  std::uniform_int_distribution<int> line_len(6, 14);
  std::uniform_int_distribution<int> digit(0, 9);
  int in_line = 0;
  int target = line_len(rng);
  while (out.size() < size) {
    if (digit(rng) == 0) {
      out.push_back(static_cast<std::uint8_t>('0' + digit(rng)));
      out.push_back(static_cast<std::uint8_t>('0' + digit(rng)));
    } else {
      auto w = kWords[word(rng)];
      out.insert(out.end(), w.begin(), w.end());
    }
    if (++in_line >= target) {
      out.push_back('\n');
      in_line = 0;
      target = line_len(rng);
    } else {
      out.push_back(' ');
    }
  }
  out.resize(size);
}

void fill_random(std::mt19937_64& rng, std::vector<std::uint8_t>& out, std::size_t size) {
  const std::size_t start = out.size();
  out.resize(start + size);
  std::size_t i = start;
  while (i < out.size()) {
    std::uint64_t v = rng();
    for (int b = 0; b < 8 && i < out.size(); ++b, ++i) {
      out[i] = static_cast<std::uint8_t>(v >> (8 * b));
    }
  }
}

}  // namespace

std::vector<std::uint8_t> generate_content(EntropyProfile profile, std::size_t size,
                                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> out;
  out.reserve(size);
  switch (profile) {
    case EntropyProfile::Low:
      fill_text(rng, out, size);
      break;
    case EntropyProfile::High:
      fill_random(rng, out, size);
      break;
    case EntropyProfile::Structured: {
      // Text runs, zero padding and small binary blocks, like a document
      // container.
      std::uniform_int_distribution<int> kind(0, 9);
      std::uniform_int_distribution<std::size_t> len(64, 1024);
      while (out.size() < size) {
        const std::size_t n = std::min(len(rng), size - out.size());
        const int k = kind(rng);
        if (k < 5) {
          std::vector<std::uint8_t> text;
          fill_text(rng, text, n);
          out.insert(out.end(), text.begin(), text.end());
        } else if (k < 7) {
          out.insert(out.end(), n, 0);
        } else {
          fill_random(rng, out, n);
        }
      }
      break;
    }
  }
  return out;
}

CorpusManifest generate_corpus(const CorpusSpec& spec, const fs::path& root) {
  spec.validate();
  fs::create_directories(root);
  if (!fs::is_empty(root)) throw std::invalid_argument("corpus root " + root.string() + " is not empty");
  CorpusManifest manifest;
  if (spec.file_count == 0) return manifest;

  std::mt19937_64 rng(spec.seed);
  // Log-uniform relative sizes over roughly two orders of magnitude.
  std::uniform_real_distribution<double> logsize(0.0, std::log(100.0));
  std::vector<double> weights(spec.file_count);
  double sum = 0.0;
  for (auto& w : weights) {
    w = std::exp(logsize(rng));
    sum += w;
  }
  const std::uint64_t floor_size =
      std::min<std::uint64_t>(4096, spec.total_bytes / spec.file_count);
  const std::uint64_t spread = spec.total_bytes - floor_size * spec.file_count;
  std::vector<std::uint64_t> sizes(spec.file_count);
  std::uint64_t assigned = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    sizes[i] = floor_size + static_cast<std::uint64_t>(std::floor(double(spread) * weights[i] / sum));
    assigned += sizes[i];
  }
  for (std::size_t i = 0; assigned < spec.total_bytes; i = (i + 1) % sizes.size()) {
    ++sizes[i];
    ++assigned;
  }

  std::vector<double> suffix_weights;
  for (const auto& s : spec.suffixes) suffix_weights.push_back(s.weight);
  std::discrete_distribution<std::size_t> pick_suffix(suffix_weights.begin(), suffix_weights.end());
  const std::size_t top = std::max<std::size_t>(1, (spec.file_count + 99) / 100);

  try {
    for (std::size_t i = 0; i < spec.file_count; ++i) {
      const auto& sfx = spec.suffixes[pick_suffix(rng)];
      char rel[96];
      std::snprintf(rel, sizeof(rel), "d%02zu/s%zu/file%05zu%s", i % top, (i / top) % 4, i,
                    sfx.suffix.c_str());
      const fs::path path = root / rel;
      fs::create_directories(path.parent_path());
      const auto content = generate_content(sfx.profile, sizes[i], spec.seed * 1000003 + i);
      std::ofstream out(path, std::ios::binary);
      out.write(reinterpret_cast<const char*>(content.data()),
                static_cast<std::streamsize>(content.size()));
      out.close();
      if (!out) throw std::runtime_error("cannot write " + path.string() + " (disk full?)");
      manifest.push_back({rel, content.size(), sha256_hex(content)});
    }
  } catch (...) {
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(root, ec)) fs::remove_all(entry.path(), ec);
    throw;
  }
  std::sort(manifest.begin(), manifest.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
  return manifest;
}

void write_manifest(const fs::path& path, const CorpusManifest& manifest) {
  std::string out;
  for (const auto& e : manifest) {
    out += telemetry::percent_encode(e.path);
    out += ' ';
    out += std::to_string(e.size);
    out += ' ';
    out += e.sha256;
    out += '\n';
  }
  textio::write_file_atomic(path, out);
}

CorpusManifest read_manifest(const fs::path& path) {
  CorpusManifest manifest;
  std::istringstream in(textio::read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (textio::trim(line).empty()) continue;
    auto f = textio::split_ws(line);
    if (f.size() != 3) throw FormatError("bad manifest line '" + line + "'");
    manifest.push_back({telemetry::percent_decode(f[0]), textio::parse_int<std::uint64_t>(f[1]),
                        std::string(f[2])});
  }
  return manifest;
}

}  // namespace guardfs::adversary
