// SPDX-License-Identifier: Apache-2.0
//
// Run directories and their manifests. Needs OpenSSL's libcrypto for SHA-256.

#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rlvrsim/errors.hpp"

namespace rlvrsim {

namespace fs = std::filesystem;

inline constexpr const char* kOutputRootEnv = "RLVRSIM_OUTPUT_ROOT";

/// --out wins, then the environment variable, then "runs".
inline fs::path output_root(const std::string& out_flag) {
    if (!out_flag.empty()) return out_flag;
    if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
    return "runs";
}

/// Creates <root>/<UTC timestamp>-seed<N>-<command>, adding a numeric suffix if taken.
inline fs::path make_run_dir(const fs::path& root, std::uint64_t seed, const std::string& command) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
    const std::string base = std::string(stamp) + "-seed" + std::to_string(seed) + "-" + command;
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create output root " + root.string() + ": " + ec.message());
    for (int k = 0; k < 1000; ++k) {
        fs::path dir = root / (k == 0 ? base : base + "-" + std::to_string(k));
        if (fs::create_directory(dir, ec)) return dir;
        if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
    }
    throw IoError("too many run directories named " + base + " under " + root.string());
}

inline std::string sha256_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw IoError("sha256 initialisation failed");
    }
    char buf[1 << 16];
    while (is.read(buf, sizeof buf) || is.gcount() > 0) {
        EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(is.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xF]);
    }
    return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline std::ofstream open_output(const fs::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    return os;
}

inline void write_text_file(const fs::path& path, const std::string& text) {
    auto os = open_output(path);
    os << text;
    if (!os) throw IoError("failed writing " + path.string());
}

inline constexpr const char* kManifestName = "manifest.json";

/// Hashes every regular file under `dir` (except the manifest) and writes manifest.json.
inline nlohmann::json write_manifest(const fs::path& dir, const nlohmann::json& meta) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().filename() != kManifestName) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    nlohmann::json m = meta;
    m["files"] = nlohmann::json::array();
    for (const auto& f : files) {
        m["files"].push_back({{"path", fs::relative(f, dir).generic_string()},
                              {"bytes", fs::file_size(f)},
                              {"sha256", sha256_file(f)}});
    }
    write_text_file(dir / kManifestName, m.dump(2) + "\n");
    return m;
}

/// Paths whose current hash differs from the manifest, or that are missing.
inline std::vector<std::string> verify_manifest(const fs::path& dir) {
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(read_text_file(dir / kManifestName));
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError((dir / kManifestName).string() + ": " + e.what());
    }
    std::vector<std::string> bad;
    for (const auto& f : m.at("files")) {
        const fs::path p = dir / f.at("path").get<std::string>();
        if (!fs::exists(p) || sha256_file(p) != f.at("sha256").get<std::string>()) bad.push_back(f.at("path"));
    }
    return bad;
}

}  // namespace rlvrsim
