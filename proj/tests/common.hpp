#pragma once

#include <string>
#include <vector>

#include "convalign/transcript.hpp"

namespace testutil {

// Alternating doctor/patient conversation with sentences "<id> s<t>".
inline convalign::Conversation conversation(const std::string& id, std::size_t T) {
    convalign::Conversation c;
    c.id = id;
    for (std::size_t t = 1; t <= T; ++t) {
        convalign::Sentence s;
        s.index = t;
        s.speaker = t % 2 ? convalign::Speaker::Doctor : convalign::Speaker::Patient;
        s.text = s.raw_text = id + " s" + std::to_string(t);
        c.sentences.push_back(s);
    }
    return c;
}

} // namespace testutil
