#pragma once

// Internal text-file helpers shared by the harness and report code. Writes
// are atomic (temp sibling + rename) so partially written artifacts can
// never be mistaken for complete ones.

#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "cdm/errors.hpp"

namespace cdm::detail {

inline void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open for writing: " + tmp.string());
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        os.flush();
        if (!os) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    if (is.bad()) throw IoError("read failed: " + path.string());
    return ss.str();
}

// printf-style formatting into a std::string; used for the deterministic
// %.17g number formatting of the CSV layer.
inline std::string strf(const char* fmt, ...) {
    va_list ap;
    va_start(ap, fmt);
    char buf[256];
    const int n = std::vsnprintf(buf, sizeof buf, fmt, ap);
    va_end(ap);
    if (n < 0 || n >= static_cast<int>(sizeof buf))
        throw IoError("strf: formatted value does not fit");
    return std::string(buf, static_cast<std::size_t>(n));
}

} // namespace cdm::detail
