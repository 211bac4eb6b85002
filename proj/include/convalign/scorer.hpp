#pragma once

// Scorer interface plus the baseline, fixture and external implementations.

#include <cctype>
#include <cerrno>
#include <cmath>
#include <csignal>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "json.hpp"

#include "convalign/dataset.hpp"
#include "convalign/error.hpp"
#include "convalign/eval.hpp"
#include "convalign/neural_scorer.hpp"
#include "convalign/tokenizer.hpp"

namespace convalign {

// Lowercased runs of letters, digits and apostrophes; punctuation is dropped.
inline std::vector<std::string> word_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c) || c == '\'' || c >= 0x80) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

class WordTokenCounter final : public TokenCounter {
public:
    std::size_t count(const Sentence& s) const override { return word_tokens(s.text).size(); }
    std::string id() const override { return "words"; }
};

class Scorer {
public:
    virtual ~Scorer() = default;
    virtual std::string id() const = 0;
    virtual std::vector<Prediction> score(const std::vector<ContextResponsePair>& pairs, std::size_t jobs = 1) = 0;
    // Tokenizer used for alignment segmentation; must be the scorer's own.
    virtual std::shared_ptr<const TokenCounter> token_counter() const = 0;
};

inline double checked_probability(double y, const std::string& pair_id) {
    if (!(y >= 0.0 && y <= 1.0))
        throw Error(Errc::ProbabilityOutOfRange, "probability " + std::to_string(y) + " for " + pair_id);
    return y;
}

// y = |set(R) ∩ set(C)| / |set(R)| over word tokens; 0 for an empty response.
inline double overlap_probability(const ContextResponsePair& pair) {
    std::set<std::string> ctx;
    for (const auto& s : pair.context)
        for (auto& t : word_tokens(s.text)) ctx.insert(std::move(t));
    const auto r = word_tokens(pair.response.text);
    const std::set<std::string> resp(r.begin(), r.end());
    if (resp.empty()) return 0.0;
    std::size_t hit = 0;
    for (const auto& t : resp) hit += ctx.count(t);
    return static_cast<double>(hit) / static_cast<double>(resp.size());
}

class OverlapScorer final : public Scorer {
public:
    std::string id() const override { return "overlap"; }
    std::vector<Prediction> score(const std::vector<ContextResponsePair>& pairs, std::size_t jobs = 1) override {
        std::vector<Prediction> out(pairs.size());
        parallel_for(pairs.size(), jobs, [&](std::size_t i) {
            out[i] = {pairs[i].pair_id, overlap_probability(pairs[i])};
        });
        return out;
    }
    std::shared_ptr<const TokenCounter> token_counter() const override {
        return std::make_shared<WordTokenCounter>();
    }
};

// Returns 1 for positives and 0 for negatives.
class OracleScorer final : public Scorer {
public:
    std::string id() const override { return "oracle"; }
    std::vector<Prediction> score(const std::vector<ContextResponsePair>& pairs, std::size_t = 1) override {
        std::vector<Prediction> out;
        out.reserve(pairs.size());
        for (const auto& p : pairs) out.push_back({p.pair_id, p.label == Label::Positive ? 1.0 : 0.0});
        return out;
    }
    std::shared_ptr<const TokenCounter> token_counter() const override {
        return std::make_shared<WordTokenCounter>();
    }
};

class ConstantScorer final : public Scorer {
public:
    explicit ConstantScorer(double y) : y_(checked_probability(y, "constant")) {}
    std::string id() const override { return "constant"; }
    std::vector<Prediction> score(const std::vector<ContextResponsePair>& pairs, std::size_t = 1) override {
        std::vector<Prediction> out;
        out.reserve(pairs.size());
        for (const auto& p : pairs) out.push_back({p.pair_id, y_});
        return out;
    }
    std::shared_ptr<const TokenCounter> token_counter() const override {
        return std::make_shared<WordTokenCounter>();
    }

private:
    double y_;
};

// Looks probabilities up by (conversation_id, response sentence index).
class PlantedScorer final : public Scorer {
public:
    using Key = std::pair<std::string, std::size_t>;

    explicit PlantedScorer(std::map<Key, double> table, std::shared_ptr<const TokenCounter> counter = nullptr)
        : table_(std::move(table)), counter_(counter ? std::move(counter) : std::make_shared<WordTokenCounter>()) {
        for (const auto& [k, y] : table_) checked_probability(y, k.first + ":" + std::to_string(k.second));
    }

    std::string id() const override { return "planted"; }
    std::vector<Prediction> score(const std::vector<ContextResponsePair>& pairs, std::size_t = 1) override {
        std::vector<Prediction> out;
        out.reserve(pairs.size());
        for (const auto& p : pairs) {
            auto it = table_.find({p.conversation_id, p.response.index});
            if (it == table_.end()) throw Error(Errc::MissingPrediction, "no planted score for " + p.pair_id);
            out.push_back({p.pair_id, it->second});
        }
        return out;
    }
    std::shared_ptr<const TokenCounter> token_counter() const override { return counter_; }

private:
    std::map<Key, double> table_;
    std::shared_ptr<const TokenCounter> counter_;
};

// ---------------------------------------------------------------------------
// Neural scorer wrapper

inline std::string joined_context(const ContextResponsePair& p) {
    std::string s;
    for (const auto& c : p.context) {
        if (!s.empty()) s += ' ';
        s += c.text;
    }
    return s;
}

inline EncodedPair encode_pair(const ContextResponsePair& p, const SubwordVocab& vocab) {
    return {p.pair_id, vocab.encode(joined_context(p)).ids, vocab.encode(p.response.text).ids, p.label};
}

inline std::vector<EncodedPair> encode_pairs(const std::vector<ContextResponsePair>& pairs,
                                             const SubwordVocab& vocab, std::size_t jobs = 1) {
    std::vector<EncodedPair> out(pairs.size());
    parallel_for(pairs.size(), jobs, [&](std::size_t i) { out[i] = encode_pair(pairs[i], vocab); });
    return out;
}

class NeuralScorer final : public Scorer {
public:
    NeuralScorer(std::shared_ptr<const NeuralModel> model, std::shared_ptr<const SubwordVocab> vocab,
                 std::string id = "neural")
        : model_(std::move(model)), vocab_(std::move(vocab)), id_(std::move(id)) {
        if (model_->config().vocab_size != vocab_->vocab_size())
            throw Error(Errc::ShapeMismatch, "model vocab_size differs from the tokenizer");
    }

    std::string id() const override { return id_; }
    std::vector<Prediction> score(const std::vector<ContextResponsePair>& pairs, std::size_t jobs = 1) override {
        const auto enc = encode_pairs(pairs, *vocab_, jobs);
        const auto probs = predict_all(*model_, enc, jobs);
        std::vector<Prediction> out(pairs.size());
        for (std::size_t i = 0; i < pairs.size(); ++i) out[i] = {pairs[i].pair_id, checked_probability(probs[i], pairs[i].pair_id)};
        return out;
    }
    std::shared_ptr<const TokenCounter> token_counter() const override {
        return std::make_shared<BpeTokenCounter>(vocab_);
    }

private:
    std::shared_ptr<const NeuralModel> model_;
    std::shared_ptr<const SubwordVocab> vocab_;
    std::string id_;
};

// ---------------------------------------------------------------------------
// External scorer: a child process speaking newline-delimited JSON on its
// stdin/stdout. Requests are answered one line each, in order.

enum class ContextFormat { Plain, Sep };

inline ContextFormat parse_context_format(std::string_view s) {
    if (s == "plain") return ContextFormat::Plain;
    if (s == "sep" || s == "sep-inserted") return ContextFormat::Sep;
    throw Error(Errc::ConfigInvalid, "unknown context format \"" + std::string(s) + "\"");
}

// `plain` joins the context with spaces into a single string; `sep` sends
// each sentence separately so the server can insert its separator token.
inline nlohmann::ordered_json scorer_request(const ContextResponsePair& p, ContextFormat format) {
    nlohmann::ordered_json j;
    j["pair_id"] = p.pair_id;
    auto ctx = nlohmann::ordered_json::array();
    if (format == ContextFormat::Plain) {
        ctx.push_back(joined_context(p));
    } else {
        for (const auto& s : p.context) ctx.push_back(s.text);
    }
    j["context"] = std::move(ctx);
    j["response"] = p.response.text;
    j["format"] = format == ContextFormat::Plain ? "plain" : "sep";
    return j;
}

class ChildProcess {
public:
    ChildProcess(const std::vector<std::string>& argv, int timeout_ms) : timeout_ms_(timeout_ms) {
        if (argv.empty()) throw Error(Errc::ConfigInvalid, "external scorer command is empty");
        int in_pipe[2], out_pipe[2];
        if (::pipe(in_pipe) != 0) throw Error(Errc::ProtocolError, std::string("pipe: ") + std::strerror(errno));
        if (::pipe(out_pipe) != 0) {
            ::close(in_pipe[0]);
            ::close(in_pipe[1]);
            throw Error(Errc::ProtocolError, std::string("pipe: ") + std::strerror(errno));
        }
        std::vector<char*> args;
        for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
        args.push_back(nullptr);
        pid_ = ::fork();
        if (pid_ < 0) throw Error(Errc::ProtocolError, std::string("fork: ") + std::strerror(errno));
        if (pid_ == 0) {
            ::dup2(in_pipe[0], STDIN_FILENO);
            ::dup2(out_pipe[1], STDOUT_FILENO);
            ::close(in_pipe[0]);
            ::close(in_pipe[1]);
            ::close(out_pipe[0]);
            ::close(out_pipe[1]);
            ::execvp(args[0], args.data());
            ::_exit(127);
        }
        ::close(in_pipe[0]);
        ::close(out_pipe[1]);
        to_child_ = in_pipe[1];
        from_child_ = out_pipe[0];
        ::fcntl(to_child_, F_SETFD, FD_CLOEXEC);
        ::fcntl(from_child_, F_SETFD, FD_CLOEXEC);
    }

    ChildProcess(const ChildProcess&) = delete;
    ChildProcess& operator=(const ChildProcess&) = delete;

    ~ChildProcess() {
        if (to_child_ >= 0) ::close(to_child_);
        if (from_child_ >= 0) ::close(from_child_);
        if (pid_ > 0) {
            int status = 0;
            // Give the child a moment to exit on EOF, then make sure it is gone.
            for (int i = 0; i < 50; ++i) {
                if (::waitpid(pid_, &status, WNOHANG) == pid_) return;
                ::usleep(2000);
            }
            ::kill(pid_, SIGKILL);
            ::waitpid(pid_, &status, 0);
        }
    }

    std::string request(const std::string& line) {
        write_all(line + "\n");
        return read_line();
    }

private:
    void write_all(const std::string& data) {
        std::signal(SIGPIPE, SIG_IGN);
        std::size_t off = 0;
        while (off < data.size()) {
            const auto n = ::write(to_child_, data.data() + off, data.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw Error(Errc::ProtocolError, std::string("write to scorer: ") + std::strerror(errno));
            }
            off += static_cast<std::size_t>(n);
        }
    }

    std::string read_line() {
        for (;;) {
            if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
                std::string line = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                return line;
            }
            pollfd pfd{from_child_, POLLIN, 0};
            const int r = ::poll(&pfd, 1, timeout_ms_);
            if (r < 0) {
                if (errno == EINTR) continue;
                throw Error(Errc::ProtocolError, std::string("poll: ") + std::strerror(errno));
            }
            if (r == 0) throw Error(Errc::Timeout, "scorer did not answer within " + std::to_string(timeout_ms_) + " ms");
            char buf[4096];
            const auto n = ::read(from_child_, buf, sizeof buf);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw Error(Errc::ProtocolError, std::string("read from scorer: ") + std::strerror(errno));
            }
            if (n == 0) throw Error(Errc::ProtocolError, "scorer closed its output");
            buffer_.append(buf, static_cast<std::size_t>(n));
        }
    }

    pid_t pid_ = -1;
    int to_child_ = -1, from_child_ = -1;
    int timeout_ms_;
    std::string buffer_;
};

struct ExternalScorerConfig {
    std::vector<std::string> command;
    ContextFormat format = ContextFormat::Plain;
    int timeout_ms = 30000;
    std::string id = "external";
};

namespace detail {
inline nlohmann::json parse_reply(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::ProtocolError, "scorer reply is not JSON: " + std::string(e.what()));
    }
    if (!j.is_object()) throw Error(Errc::ProtocolError, "scorer reply is not an object");
    if (j.contains("error")) throw Error(Errc::ProtocolError, "scorer reported: " + j["error"].dump());
    return j;
}
} // namespace detail

class ExternalScorer;

// Counts tokens with the external scorer's own tokenizer (op count_tokens).
class ExternalTokenCounter final : public TokenCounter {
public:
    ExternalTokenCounter(std::shared_ptr<ChildProcess> proc, std::shared_ptr<std::mutex> lock, std::string id)
        : proc_(std::move(proc)), lock_(std::move(lock)), id_(std::move(id)) {}

    std::size_t count(const Sentence& s) const override {
        nlohmann::ordered_json req{{"op", "count_tokens"}, {"text", s.text}};
        std::lock_guard<std::mutex> g(*lock_);
        const auto j = detail::parse_reply(proc_->request(req.dump()));
        if (!j.contains("count") || !j["count"].is_number_integer() || j["count"].get<long long>() < 0)
            throw Error(Errc::ProtocolError, "count_tokens reply lacks a non-negative integer count");
        return j["count"].get<std::size_t>();
    }
    std::string id() const override { return id_ + "-tokens"; }

private:
    std::shared_ptr<ChildProcess> proc_;
    std::shared_ptr<std::mutex> lock_;
    std::string id_;
};

class ExternalScorer final : public Scorer {
public:
    explicit ExternalScorer(ExternalScorerConfig cfg)
        : cfg_(std::move(cfg)), proc_(std::make_shared<ChildProcess>(cfg_.command, cfg_.timeout_ms)),
          lock_(std::make_shared<std::mutex>()) {}

    std::string id() const override { return cfg_.id; }

    // One request in flight at a time, so --jobs has no effect here.
    std::vector<Prediction> score(const std::vector<ContextResponsePair>& pairs, std::size_t = 1) override {
        std::vector<Prediction> out;
        out.reserve(pairs.size());
        std::lock_guard<std::mutex> g(*lock_);
        for (const auto& p : pairs) {
            const auto j = detail::parse_reply(proc_->request(scorer_request(p, cfg_.format).dump()));
            if (!j.contains("pair_id") || !j["pair_id"].is_string() || j["pair_id"].get<std::string>() != p.pair_id)
                throw Error(Errc::ProtocolError, "scorer reply out of order for " + p.pair_id);
            if (!j.contains("prob") || !j["prob"].is_number())
                throw Error(Errc::ProtocolError, "scorer reply for " + p.pair_id + " lacks a numeric prob");
            out.push_back({p.pair_id, checked_probability(j["prob"].get<double>(), p.pair_id)});
        }
        return out;
    }

    std::shared_ptr<const TokenCounter> token_counter() const override {
        return std::make_shared<ExternalTokenCounter>(proc_, lock_, cfg_.id);
    }

private:
    ExternalScorerConfig cfg_;
    std::shared_ptr<ChildProcess> proc_;
    std::shared_ptr<std::mutex> lock_;
};

} // namespace convalign
