// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "tdmoe/corpus.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <utility>

#include "tdmoe/errors.hpp"

namespace tdmoe {

Vocabulary Vocabulary::from_text(std::string_view text) {
  std::array<bool, 256> seen{};
  for (char c : text) seen[static_cast<unsigned char>(c)] = true;
  std::vector<unsigned char> symbols;
  for (int c = 0; c < 256; ++c) {
    if (seen[c]) symbols.push_back(static_cast<unsigned char>(c));
  }
  return from_symbols(std::move(symbols));
}

Vocabulary Vocabulary::from_symbols(std::vector<unsigned char> symbols) {
  Vocabulary v;
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i > 0 && symbols[i] <= symbols[i - 1]) {
      throw LoadError("vocabulary symbols must be strictly ascending");
    }
    v.index_[symbols[i]] = static_cast<int>(i);
  }
  v.symbols_ = std::move(symbols);
  return v;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(id(static_cast<unsigned char>(c)));
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    out.push_back(id >= 0 && static_cast<std::size_t>(id) < symbols_.size()
                      ? static_cast<char>(symbols_[static_cast<std::size_t>(id)])
                      : '?');
  }
  return out;
}

Corpus split_corpus(std::string_view text, const SplitOptions& options) {
  return split_corpus(text, Vocabulary::from_text(text), options);
}

Corpus split_corpus(std::string_view text, Vocabulary vocab, const SplitOptions& options) {
  if (options.heldout_fraction < 0.0 || options.heldout_fraction >= 1.0) {
    throw ConfigError("heldout_fraction", "must lie in [0, 1)");
  }
  if (options.block_size == 0) throw ConfigError("block_size", "must be positive");
  Corpus corpus;
  corpus.vocab = std::move(vocab);
  const std::vector<int> ids = corpus.vocab.encode(text);
  const double f = options.heldout_fraction;
  for (std::size_t start = 0, block = 0; start < ids.size(); start += options.block_size, ++block) {
    const std::size_t end = std::min(ids.size(), start + options.block_size);
    const bool held = std::floor(static_cast<double>(block + 1) * f) >
                      std::floor(static_cast<double>(block) * f);
    auto& dst = held ? corpus.heldout : corpus.train;
    dst.insert(dst.end(), ids.begin() + static_cast<std::ptrdiff_t>(start),
               ids.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return corpus;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open text file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

Corpus ingest_corpus(const std::filesystem::path& path, const SplitOptions& options) {
  const std::string text = read_text_file(path);
  if (text.empty()) throw LoadError("corpus file " + path.string() + " is empty");
  return split_corpus(text, options);
}

TokenBatch sample_batch(std::span<const int> stream, std::size_t batch, std::size_t seq,
                        Rng& rng) {
  if (seq == 0 || batch == 0) throw ConfigError("batch", "batch and sequence length must be positive");
  if (stream.size() < seq) {
    throw ConfigError("corpus", "token stream of " + std::to_string(stream.size()) +
                                    " tokens is shorter than one sequence of " +
                                    std::to_string(seq));
  }
  TokenBatch out{batch, seq, {}};
  out.ids.reserve(batch * seq);
  const std::size_t span = stream.size() - seq + 1;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t off = rng.index(span);
    out.ids.insert(out.ids.end(), stream.begin() + static_cast<std::ptrdiff_t>(off),
                   stream.begin() + static_cast<std::ptrdiff_t>(off + seq));
  }
  return out;
}

std::vector<TokenBatch> eval_batches(std::span<const int> stream, std::size_t batch,
                                     std::size_t seq, std::size_t max_tokens) {
  if (seq == 0 || batch == 0) throw ConfigError("batch", "batch and sequence length must be positive");
  std::size_t windows = stream.size() / seq;
  if (max_tokens > 0) windows = std::min(windows, std::max<std::size_t>(1, max_tokens / seq));
  std::vector<TokenBatch> out;
  for (std::size_t w = 0; w < windows; w += batch) {
    const std::size_t n = std::min(batch, windows - w);
    TokenBatch tb{n, seq, {}};
    tb.ids.assign(stream.begin() + static_cast<std::ptrdiff_t>(w * seq),
                  stream.begin() + static_cast<std::ptrdiff_t>((w + n) * seq));
    out.push_back(std::move(tb));
  }
  return out;
}

namespace {

constexpr std::array kNouns = {
    "river",  "mountain", "village", "castle",  "garden", "forest",  "lantern", "letter",
    "window", "harbor",   "merchant", "soldier", "teacher", "doctor", "farmer",  "sailor",
    "king",   "queen",    "horse",   "dog",     "bird",   "ship",    "road",    "bridge",
    "tower",  "market",   "field",   "house",   "door",   "table",   "book",    "candle",
    "sword",  "coin",     "bell",    "storm",   "stone",  "tree",    "flower",  "cloud",
    "star",   "island",   "baker",   "painter", "clock",  "map",     "key",     "boat",
    "lamp",   "wagon",    "orchard", "well",    "ladder", "basket",  "engine",  "owl"};
constexpr std::array kAdjectives = {
    "old",     "young",   "quiet",   "bright",  "dark",    "small",   "great",  "cold",
    "warm",    "ancient", "gentle",  "wild",    "heavy",   "narrow",  "broad",  "silent",
    "golden",  "silver",  "green",   "grey",    "tired",   "happy",   "strange", "simple",
    "hidden",  "distant", "proud",   "careful", "patient", "empty",   "crooked", "red"};
constexpr std::array kTransitive = {
    "watched", "found",   "carried", "opened",  "closed",  "followed", "remembered",
    "crossed", "built",   "painted", "repaired", "visited", "answered", "called",
    "wrote",   "heard",   "saw",     "left",    "reached", "gathered", "lifted",
    "kept",    "sold",    "bought",  "guarded", "climbed", "cleaned",  "counted"};
constexpr std::array kIntransitive = {"waited",   "slept",  "laughed",  "listened",
                                      "wondered", "rested", "smiled",   "paused",
                                      "returned", "arrived", "worked",  "sang"};
constexpr std::array kAdverbs = {"slowly", "quickly", "quietly", "carefully", "suddenly",
                                 "gently", "again",   "together", "alone",   "early",
                                 "late",   "softly"};
constexpr std::array kPrepositions = {"near",   "beyond", "under",  "behind", "across",
                                      "beside", "toward", "inside", "above",  "along"};
constexpr std::array kNames = {"Anna",  "Thomas", "Elena", "Marcus",   "Clara",  "Henry",
                               "Lucia", "Oliver", "Miriam", "Jonas",   "Beatrice", "Samuel",
                               "Ada",   "Felix",  "Rosa",  "Victor",   "Helen",  "Peter",
                               "Ingrid", "Paul"};
constexpr std::array kPlaces = {"Westbrook", "Ashford",   "Marlow",   "Kingsbridge", "Eastmere",
                                "Stonehaven", "Redcliff", "Northgate", "Fairhaven",  "Millbury"};
constexpr std::array kTimes = {"morning", "afternoon", "evening", "night", "dawn",
                               "winter",  "spring",    "autumn",  "summer"};
constexpr std::array kCounts = {"two",   "three", "four",  "five",   "six",   "seven",
                                "eight", "nine",  "ten",   "eleven", "twelve", "many"};

class Prose {
 public:
  explicit Prose(std::uint64_t seed) : rng_(seed) {}

  template <std::size_t N>
  const char* pick(const std::array<const char*, N>& words) {
    return words[rng_.index(N)];
  }

  std::string plural(const char* noun) {
    std::string s(noun);
    if (s.ends_with("s") || s.ends_with("x") || s.ends_with("ch") || s.ends_with("sh")) return s + "es";
    if (s.ends_with("y") && s.size() > 1 && std::string("aeiou").find(s[s.size() - 2]) == std::string::npos) {
      return s.substr(0, s.size() - 1) + "ies";
    }
    return s + "s";
  }

  static std::string article(const std::string& word) {
    return std::string("aeiou").find(word[0]) != std::string::npos ? "an " + word : "a " + word;
  }

  std::string year() { return std::to_string(1700 + rng_.index(200)); }

  std::string sentence() {
    const std::string n1 = pick(kNouns), n2 = pick(kNouns), n3 = pick(kNouns);
    const std::string a1 = pick(kAdjectives);
    const std::string name = pick(kNames), name2 = pick(kNames);
    switch (rng_.index(12)) {
      case 0:
        return "The " + a1 + " " + n1 + " " + pick(kTransitive) + " the " + n2 + " " +
               pick(kPrepositions) + " the " + n3 + ".";
      case 1:
        return name + " " + pick(kTransitive) + " the " + a1 + " " + n1 + " " + pick(kAdverbs) + ".";
      case 2:
        return name + " and " + name2 + " " + pick(kIntransitive) + " " + pick(kPrepositions) +
               " the " + n1 + ".";
      case 3:
        return "In " + year() + ", " + name + " " + pick(kTransitive) + " " + article(n1) +
               " in " + pick(kPlaces) + ".";
      case 4:
        return "It was " + article(a1) + " " + pick(kTimes) + " in " + pick(kPlaces) +
               ", and the " + n1 + " " + pick(kIntransitive) + ".";
      case 5:
        return "\"Where is the " + n1 + "?\" asked " + name + ".";
      case 6:
        return "\"The " + n1 + " is " + pick(kPrepositions) + " the " + n2 + ",\" said " + name +
               " " + pick(kAdverbs) + ".";
      case 7:
        return name + " had " + pick(kCounts) + " " + plural(n1.c_str()) + " and " +
               std::to_string(2 + rng_.index(98)) + " " + plural(n2.c_str()) + ".";
      case 8:
        return "Every " + std::string(pick(kTimes)) + ", the " + n1 + " " + pick(kIntransitive) +
               " " + pick(kAdverbs) + ".";
      case 9:
        return "When the " + n1 + " " + pick(kIntransitive) + ", " + name + " " +
               pick(kTransitive) + " the " + n2 + ".";
      case 10:
        return "There were " + std::string(pick(kCounts)) + " " + a1 + " " + plural(n1.c_str()) +
               " " + pick(kPrepositions) + " the " + n2 + ".";
      default:
        return "The " + n1 + " of " + pick(kPlaces) + " " + pick(kTransitive) + " " +
               std::to_string(10 + rng_.index(990)) + " " + plural(n2.c_str()) + " in " + year() + ".";
    }
  }

  void paragraph(std::string& out) {
    const std::size_t sentences = 3 + rng_.index(4);
    std::size_t column = 0;
    for (std::size_t s = 0; s < sentences; ++s) {
      std::istringstream words(sentence());
      std::string w;
      while (words >> w) {
        if (column > 0 && column + 1 + w.size() > 72) {
          out += '\n';
          column = 0;
        } else if (column > 0) {
          out += ' ';
          ++column;
        }
        out += w;
        column += w.size();
      }
    }
    out += "\n\n";
  }

  std::size_t chance(std::size_t n) { return rng_.index(n); }

 private:
  Rng rng_;
};

std::string roman(std::size_t n) {
  static constexpr std::array<std::pair<std::size_t, const char*>, 13> kTable = {{
      {1000, "M"}, {900, "CM"}, {500, "D"}, {400, "CD"}, {100, "C"}, {90, "XC"}, {50, "L"},
      {40, "XL"}, {10, "X"}, {9, "IX"}, {5, "V"}, {4, "IV"}, {1, "I"}}};
  std::string out;
  for (const auto& [value, glyph] : kTable) {
    while (n >= value) {
      out += glyph;
      n -= value;
    }
  }
  return out;
}

}  // namespace

std::string synthesize_text(std::uint64_t seed, std::size_t bytes) {
  Prose prose(seed);
  std::string out;
  out.reserve(bytes + 1024);
  std::size_t chapter = 1;
  while (out.size() < bytes) {
    if (prose.chance(40) == 0 || out.empty()) out += "CHAPTER " + roman(chapter++) + "\n\n";
    prose.paragraph(out);
  }
  return out;
}

}  // namespace tdmoe
