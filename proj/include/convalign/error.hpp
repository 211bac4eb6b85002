#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace convalign {

enum class Errc {
    MalformedDocument,
    MultipartyConversation,
    EmptyCorpus,
    VocabTooSmall,
    MalformedVocab,
    TooFewPairs,
    InsufficientPool,
    ShapeMismatch,
    Diverged,
    ProtocolError,
    Timeout,
    ProbabilityOutOfRange,
    MissingPrediction,
    KOutOfRange,
    TooShort,
    InvalidInterval,
    RankDeficient,
    TooFewRows,
    Singular,
    NonConvergence,
    InvalidP,
    MissingInput,
    ConfigInvalid,
    UpstreamStageFailed,
};

constexpr std::string_view to_string(Errc e) noexcept {
    switch (e) {
    case Errc::MalformedDocument: return "MalformedDocument";
    case Errc::MultipartyConversation: return "MultipartyConversation";
    case Errc::EmptyCorpus: return "EmptyCorpus";
    case Errc::VocabTooSmall: return "VocabTooSmall";
    case Errc::MalformedVocab: return "MalformedVocab";
    case Errc::TooFewPairs: return "TooFewPairs";
    case Errc::InsufficientPool: return "InsufficientPool";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::Diverged: return "Diverged";
    case Errc::ProtocolError: return "ProtocolError";
    case Errc::Timeout: return "Timeout";
    case Errc::ProbabilityOutOfRange: return "ProbabilityOutOfRange";
    case Errc::MissingPrediction: return "MissingPrediction";
    case Errc::KOutOfRange: return "KOutOfRange";
    case Errc::TooShort: return "TooShort";
    case Errc::InvalidInterval: return "InvalidInterval";
    case Errc::RankDeficient: return "RankDeficient";
    case Errc::TooFewRows: return "TooFewRows";
    case Errc::Singular: return "Singular";
    case Errc::NonConvergence: return "NonConvergence";
    case Errc::InvalidP: return "InvalidP";
    case Errc::MissingInput: return "MissingInput";
    case Errc::ConfigInvalid: return "ConfigInvalid";
    case Errc::UpstreamStageFailed: return "UpstreamStageFailed";
    }
    return "Unknown";
}

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

} // namespace convalign
