#include "bitdance/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "bitdance/error.hpp"

namespace bitdance {

namespace {

constexpr char kMagic[4] = {'B', 'D', 'C', 'K'};

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    template <class T>
    void le(T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void str(const std::string& s) {
        le<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void f64(double v) { le<std::uint64_t>(std::bit_cast<std::uint64_t>(v)); }

    std::vector<std::uint8_t> buf;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}

    void need(std::size_t n) const {
        if (n > buf.size() - pos) throw FormatError("checkpoint truncated");
    }
    template <class T>
    T le() {
        need(sizeof(T));
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[pos + i]) << (8 * i);
        pos += sizeof(T);
        return v;
    }
    std::string str() {
        const auto n = le<std::uint32_t>();
        need(n);
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
        pos += n;
        return s;
    }
    double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
    bool done() const { return pos == buf.size(); }

    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;
};

}  // namespace

std::map<std::string, Matrix> Checkpoint::with_prefix(const std::string& prefix) const {
    std::map<std::string, Matrix> out;
    for (const auto& [name, m] : tensors)
        if (name.rfind(prefix, 0) == 0) out[name.substr(prefix.size())] = m;
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    Writer w;
    w.bytes(kMagic, 4);
    w.le<std::uint32_t>(kCheckpointVersion);
    w.str(ckpt.kind);
    w.str(ckpt.config_text);
    w.str(ckpt.rng_state);
    w.le<std::uint64_t>(ckpt.step);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, m] : ckpt.tensors) {
        w.str(name);
        w.le<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
        w.le<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
        for (double v : m.values()) w.f64(v);
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw FormatError(path.string() + ": not a checkpoint (bad magic)");
    }
    Reader r(buf);
    r.pos = 4;
    const auto version = r.le<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ck;
    ck.kind = r.str();
    ck.config_text = r.str();
    ck.rng_state = r.str();
    ck.step = r.le<std::uint64_t>();
    const auto count = r.le<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        const auto rows = r.le<std::uint32_t>(), cols = r.le<std::uint32_t>();
        const std::uint64_t n = std::uint64_t{rows} * cols;
        if (n > (buf.size() - r.pos) / 8) throw FormatError(path.string() + ": tensor '" + name + "' truncated");
        Matrix m(rows, cols);
        for (std::uint64_t k = 0; k < n; ++k) m[k] = r.f64();
        ck.tensors.emplace(std::move(name), std::move(m));
    }
    if (!r.done()) throw FormatError(path.string() + ": trailing bytes after checkpoint");
    return ck;
}

}  // namespace bitdance
