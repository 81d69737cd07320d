// Shared helpers for the test binaries.

#pragma once

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "malaria/annotations.hpp"
#include "malaria/synth.hpp"

namespace testutil {

/// A fresh directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("malaria_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// A small default-spec corpus generated once per test process.
struct SharedCorpus {
    TempDir dir{"corpus"};
    std::vector<malaria::SlideRecord> records;

    static const SharedCorpus& get() {
        static const SharedCorpus corpus;
        return corpus;
    }

private:
    SharedCorpus() {
        const auto summary = malaria::generate_corpus(24, malaria::default_synth_spec(), 5, dir.path());
        records = malaria::parse_annotations(summary.annotations);
    }
};

} // namespace testutil
