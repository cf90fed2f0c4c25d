#pragma once

#include <filesystem>
#include <string>

#include "flowconvert/config.hpp"

// Small, fast configuration for plumbing tests.
inline flowconvert::RunConfig tiny_config()
{
    flowconvert::RunConfig c;
    c.corpus.n_words = 60;
    c.corpus.utterances_per_speaker = 10;
    c.features.phoneme_embedding_dim = 8;
    c.features.encoder_dim = 8;
    c.flow.steps = 2;
    c.flow.hidden = 16;
    c.train_flow.steps = 4;
    c.train_duration.steps = 4;
    c.train_attention.steps = 4;
    c.train_classifiers.steps = 20;
    c.train_classifiers.frame_steps = 20;
    c.train_classifiers.hidden = 16;
    c.sync_derived();
    return c;
}

inline std::filesystem::path fresh_dir(const std::string& name)
{
    auto p = std::filesystem::temp_directory_path() / ("flowconvert_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}
