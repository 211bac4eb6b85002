#pragma once

// Byte-pair subword tokenizer. Text is pre-split into chunks (word runs,
// single punctuation marks, whitespace), each chunk is split into UTF-8 code
// points and merges are applied inside chunks only. A single space preceding
// a word or punctuation mark is attached to it, so decode() is plain
// concatenation and reproduces the input exactly when no UNK was emitted.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "convalign/error.hpp"
#include "convalign/rng.hpp"
#include "convalign/transcript.hpp"

namespace convalign {

using TokenId = std::int32_t;

struct SpecialTokens {
    static constexpr TokenId pad = 0;
    static constexpr TokenId unk = 1;
    static constexpr TokenId cls = 2;
    static constexpr TokenId sep = 3;
    static constexpr TokenId count = 4;
};

inline constexpr std::size_t kDefaultVocabSize = 2000;
inline constexpr std::size_t kDefaultMaxTokens = 512;

namespace detail {

inline std::size_t utf8_length(unsigned char lead) noexcept {
    if (lead < 0x80) return 1;
    if ((lead >> 5) == 0x6) return 2;
    if ((lead >> 4) == 0xE) return 3;
    if ((lead >> 3) == 0x1E) return 4;
    return 1; // stray continuation byte: treat as its own symbol
}

inline std::vector<std::string> split_codepoints(std::string_view s) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < s.size();) {
        const std::size_t n = std::min(utf8_length(static_cast<unsigned char>(s[i])), s.size() - i);
        out.emplace_back(s.substr(i, n));
        i += n;
    }
    return out;
}

} // namespace detail

// Splits text into merge domains. Word runs are maximal runs of letters,
// digits, apostrophes and non-ASCII bytes; every other non-space byte is a
// chunk of its own. One space directly before a chunk is glued to its front.
inline std::vector<std::string> pretokenize(std::string_view text) {
    std::vector<std::string> chunks;
    auto is_word = [](unsigned char c) { return std::isalnum(c) || c == '\'' || c >= 0x80; };
    std::size_t i = 0;
    while (i < text.size()) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        std::size_t start = i;
        if (c == ' ' && i + 1 < text.size() &&
            !std::isspace(static_cast<unsigned char>(text[i + 1]))) {
            ++i; // glue the space to the following chunk
        } else if (std::isspace(c)) {
            chunks.emplace_back(text.substr(i, 1));
            ++i;
            continue;
        }
        const unsigned char d = static_cast<unsigned char>(text[i]);
        if (is_word(d)) {
            while (i < text.size() && is_word(static_cast<unsigned char>(text[i]))) ++i;
        } else {
            ++i;
        }
        chunks.emplace_back(text.substr(start, i - start));
    }
    return chunks;
}

struct TokenSeq {
    std::vector<TokenId> ids;
    std::size_t length() const noexcept { return ids.size(); }
    bool operator==(const TokenSeq&) const = default;
};

class SubwordVocab {
public:
    SubwordVocab() { rebuild(); }

    SubwordVocab(std::vector<std::string> alphabet,
                 std::vector<std::pair<std::string, std::string>> merges, bool lowercase = false)
        : alphabet_(std::move(alphabet)), merges_(std::move(merges)), lowercase_(lowercase) {
        rebuild();
    }

    std::size_t vocab_size() const noexcept { return id_to_token_.size(); }
    const std::vector<std::string>& alphabet() const noexcept { return alphabet_; }
    const std::vector<std::pair<std::string, std::string>>& merges() const noexcept { return merges_; }
    bool lowercase() const noexcept { return lowercase_; }

    const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }

    std::optional<TokenId> id_of(const std::string& token) const {
        auto it = token_to_id_.find(token);
        if (it == token_to_id_.end()) return std::nullopt;
        return it->second;
    }

    TokenSeq encode(std::string_view text) const {
        TokenSeq seq;
        const std::string prepared = lowercase_ ? detail::ascii_lower(text) : std::string(text);
        for (const auto& chunk : pretokenize(prepared)) {
            const auto& ids = encode_chunk(chunk);
            seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
        }
        return seq;
    }

    std::string decode(const TokenSeq& seq) const {
        std::string out;
        for (TokenId id : seq.ids) {
            if (id < SpecialTokens::count) {
                if (id == SpecialTokens::unk) out.append("\xEF\xBF\xBD"); // U+FFFD
                continue;
            }
            out.append(token(id));
        }
        return out;
    }

    // Serialized form: a header line, then one alphabet symbol per line, then
    // one merge per line as "left right". Spaces, tabs, newlines and
    // backslashes inside symbols are escaped as \s \t \n \\.
    void save(std::ostream& out) const {
        out << "#bpe-vocab version=1 vocab_size=" << vocab_size() << " pad=" << SpecialTokens::pad
            << " unk=" << SpecialTokens::unk << " cls=" << SpecialTokens::cls
            << " sep=" << SpecialTokens::sep << " lowercase=" << (lowercase_ ? 1 : 0)
            << " alphabet=" << alphabet_.size() << " merges=" << merges_.size() << '\n';
        for (const auto& a : alphabet_) out << escape(a) << '\n';
        for (const auto& [l, r] : merges_) out << escape(l) << ' ' << escape(r) << '\n';
    }

    std::string to_string() const {
        std::ostringstream out;
        save(out);
        return out.str();
    }

    static SubwordVocab load(std::istream& in) {
        std::string header;
        if (!std::getline(in, header) || header.rfind("#bpe-vocab", 0) != 0)
            throw Error(Errc::MalformedVocab, "missing #bpe-vocab header");
        std::map<std::string, long long> fields;
        std::istringstream hs(header.substr(10));
        std::string kv;
        while (hs >> kv) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw Error(Errc::MalformedVocab, "bad header field " + kv);
            try {
                fields[kv.substr(0, eq)] = std::stoll(kv.substr(eq + 1));
            } catch (const std::exception&) {
                throw Error(Errc::MalformedVocab, "bad header value " + kv);
            }
        }
        for (const char* key : {"version", "vocab_size", "pad", "unk", "cls", "sep", "alphabet", "merges"})
            if (!fields.count(key)) throw Error(Errc::MalformedVocab, std::string("header lacks ") + key);
        if (fields["version"] != 1) throw Error(Errc::MalformedVocab, "unsupported vocab version");
        if (fields["pad"] != SpecialTokens::pad || fields["unk"] != SpecialTokens::unk ||
            fields["cls"] != SpecialTokens::cls || fields["sep"] != SpecialTokens::sep)
            throw Error(Errc::MalformedVocab, "special-token ids differ from the reserved ids");
        std::vector<std::string> alphabet;
        std::vector<std::pair<std::string, std::string>> merges;
        std::string line;
        for (long long i = 0; i < fields["alphabet"]; ++i) {
            if (!std::getline(in, line)) throw Error(Errc::MalformedVocab, "truncated alphabet");
            alphabet.push_back(unescape(line));
        }
        for (long long i = 0; i < fields["merges"]; ++i) {
            if (!std::getline(in, line)) throw Error(Errc::MalformedVocab, "truncated merges");
            const auto sp = line.find(' ');
            if (sp == std::string::npos || line.find(' ', sp + 1) != std::string::npos)
                throw Error(Errc::MalformedVocab, "merge line must be \"left right\": " + line);
            merges.emplace_back(unescape(line.substr(0, sp)), unescape(line.substr(sp + 1)));
        }
        SubwordVocab v(std::move(alphabet), std::move(merges), fields.count("lowercase") && fields["lowercase"] != 0);
        if (static_cast<long long>(v.vocab_size()) != fields["vocab_size"])
            throw Error(Errc::MalformedVocab, "vocab_size does not match the listed symbols");
        return v;
    }

    static SubwordVocab from_string(const std::string& s) {
        std::istringstream in(s);
        return load(in);
    }

    bool operator==(const SubwordVocab& o) const {
        return alphabet_ == o.alphabet_ && merges_ == o.merges_ && lowercase_ == o.lowercase_;
    }

private:
    static std::string escape(const std::string& s) {
        std::string out;
        for (char c : s) {
            switch (c) {
            case ' ': out += "\\s"; break;
            case '\t': out += "\\t"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\\': out += "\\\\"; break;
            default: out.push_back(c);
            }
        }
        return out;
    }

    static std::string unescape(const std::string& s) {
        std::string out;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] != '\\' || i + 1 == s.size()) {
                out.push_back(s[i]);
                continue;
            }
            switch (s[++i]) {
            case 's': out.push_back(' '); break;
            case 't': out.push_back('\t'); break;
            case 'n': out.push_back('\n'); break;
            case 'r': out.push_back('\r'); break;
            default: out.push_back(s[i]);
            }
        }
        return out;
    }

    void rebuild() {
        id_to_token_ = {"<pad>", "<unk>", "<cls>", "<sep>"};
        token_to_id_.clear();
        rank_.clear();
        for (const auto& a : alphabet_) add_token(a);
        for (std::size_t r = 0; r < merges_.size(); ++r) {
            const auto& [l, rr] = merges_[r];
            rank_.emplace(l + '\x1f' + rr, r);
            add_token(l + rr);
        }
    }

    void add_token(const std::string& t) {
        if (token_to_id_.count(t)) throw Error(Errc::MalformedVocab, "duplicate symbol \"" + t + "\"");
        token_to_id_.emplace(t, static_cast<TokenId>(id_to_token_.size()));
        id_to_token_.push_back(t);
    }

    const std::vector<TokenId>& encode_chunk(const std::string& chunk) const {
        {
            std::lock_guard lock(cache_->mutex);
            auto it = cache_->chunks.find(chunk);
            if (it != cache_->chunks.end()) return it->second;
        }
        std::vector<std::string> symbols = detail::split_codepoints(chunk);
        std::vector<bool> known(symbols.size());
        for (std::size_t i = 0; i < symbols.size(); ++i) known[i] = token_to_id_.count(symbols[i]) > 0;
        while (symbols.size() > 1) {
            std::size_t best_rank = std::numeric_limits<std::size_t>::max(), best = 0;
            for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
                if (!known[i] || !known[i + 1]) continue;
                auto it = rank_.find(symbols[i] + '\x1f' + symbols[i + 1]);
                if (it != rank_.end() && it->second < best_rank) {
                    best_rank = it->second;
                    best = i;
                }
            }
            if (best_rank == std::numeric_limits<std::size_t>::max()) break;
            symbols[best] += symbols[best + 1];
            symbols.erase(symbols.begin() + static_cast<std::ptrdiff_t>(best) + 1);
            known.erase(known.begin() + static_cast<std::ptrdiff_t>(best) + 1);
        }
        std::vector<TokenId> ids;
        ids.reserve(symbols.size());
        for (std::size_t i = 0; i < symbols.size(); ++i)
            ids.push_back(known[i] ? token_to_id_.at(symbols[i]) : SpecialTokens::unk);
        std::lock_guard lock(cache_->mutex);
        return cache_->chunks.emplace(chunk, std::move(ids)).first->second;
    }

    struct Cache {
        std::mutex mutex;
        std::unordered_map<std::string, std::vector<TokenId>> chunks;
    };

    std::vector<std::string> alphabet_;
    std::vector<std::pair<std::string, std::string>> merges_;
    bool lowercase_ = false;
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, TokenId> token_to_id_;
    std::unordered_map<std::string, std::size_t> rank_;
    // Memo of chunk encodings; logically const, shared by copies.
    std::shared_ptr<Cache> cache_ = std::make_shared<Cache>();
};

// Learns merges until the vocabulary reaches target_vocab symbols (including
// the four specials) or no pair occurs at least twice. Pair-frequency ties
// are broken by the lexicographically smallest (left, right). The procedure
// is deterministic; seed is accepted for interface symmetry and ignored.
inline SubwordVocab train_bpe(const std::vector<std::string>& corpus, std::size_t target_vocab,
                              std::uint64_t seed = 0, bool lowercase = false) {
    (void)seed;
    if (corpus.empty()) throw Error(Errc::EmptyCorpus, "train_bpe on an empty corpus");

    std::map<std::string, std::size_t> chunk_freq;
    for (const auto& text : corpus) {
        const std::string prepared = lowercase ? detail::ascii_lower(text) : text;
        for (auto& c : pretokenize(prepared)) ++chunk_freq[c];
    }
    std::set<std::string> alpha_set;
    struct Word {
        std::vector<std::string> symbols;
        std::size_t freq;
    };
    std::vector<Word> words;
    for (const auto& [chunk, f] : chunk_freq) {
        auto cps = detail::split_codepoints(chunk);
        alpha_set.insert(cps.begin(), cps.end());
        words.push_back({std::move(cps), f});
    }
    std::vector<std::string> alphabet(alpha_set.begin(), alpha_set.end());
    const std::size_t base = SpecialTokens::count + alphabet.size();
    if (target_vocab < base)
        throw Error(Errc::VocabTooSmall, "target vocabulary " + std::to_string(target_vocab) +
                                             " is below alphabet + specials = " + std::to_string(base));

    std::vector<std::pair<std::string, std::string>> merges;
    while (base + merges.size() < target_vocab) {
        std::map<std::pair<std::string, std::string>, std::size_t> pairs;
        for (const auto& w : words)
            for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i)
                pairs[{w.symbols[i], w.symbols[i + 1]}] += w.freq;
        const std::pair<std::string, std::string>* best = nullptr;
        std::size_t best_freq = 1;
        for (const auto& [p, f] : pairs) {
            if (f > best_freq) { // std::map order makes the first maximum the smallest pair
                best_freq = f;
                best = &p;
            }
        }
        if (!best) break;
        const auto merge = *best;
        merges.push_back(merge);
        const std::string joined = merge.first + merge.second;
        for (auto& w : words) {
            auto& s = w.symbols;
            for (std::size_t i = 0; i + 1 < s.size();) {
                if (s[i] == merge.first && s[i + 1] == merge.second) {
                    s[i] = joined;
                    s.erase(s.begin() + static_cast<std::ptrdiff_t>(i) + 1);
                } else {
                    ++i;
                }
            }
        }
        // Two different merges can produce the same string ("a"+"bc" vs "ab"+"c");
        // drop the later one so token ids stay unique.
        for (std::size_t i = 0; i + 1 < merges.size(); ++i) {
            if (merges[i].first + merges[i].second == joined) {
                merges.pop_back();
                break;
            }
        }
    }
    return SubwordVocab(std::move(alphabet), std::move(merges), lowercase);
}

// Counts tokens of a sentence under some tokenizer. The neural scorer counts
// BPE tokens; external scorers report their own counts.
class TokenCounter {
public:
    virtual ~TokenCounter() = default;
    virtual std::size_t count(const Sentence& s) const = 0;
    virtual std::string id() const = 0;
};

class BpeTokenCounter final : public TokenCounter {
public:
    explicit BpeTokenCounter(std::shared_ptr<const SubwordVocab> vocab, std::string id = "bpe")
        : vocab_(std::move(vocab)), id_(std::move(id)) {}
    std::size_t count(const Sentence& s) const override { return vocab_->encode(s.text).length(); }
    std::string id() const override { return id_ + "-" + std::to_string(vocab_->vocab_size()); }

private:
    std::shared_ptr<const SubwordVocab> vocab_;
    std::string id_;
};

inline std::size_t token_count(const Sentence& s, const SubwordVocab& vocab) {
    return vocab.encode(s.text).length();
}

} // namespace convalign
