#include "calcquant/volgrid.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <system_error>

namespace calcquant {

void Grid3::validate() const {
    for (int a = 0; a < 3; ++a) {
        require(dims[a] >= 1, ErrorCode::invalid_argument, "grid dims must be >= 1");
        require(std::isfinite(spacing[a]) && spacing[a] > 0.0, ErrorCode::invalid_argument,
                "grid spacing must be positive");
        require(std::isfinite(origin[a]), ErrorCode::invalid_argument, "grid origin must be finite");
    }
}

void HuTraits::check(std::span<const double> samples) {
    for (double v : samples) {
        require(std::isfinite(v) && v >= -32768.0 && v <= 32767.0, ErrorCode::domain,
                "HU sample outside the signed 16-bit range");
    }
}

void ProbabilityTraits::check(std::span<const double> samples) {
    for (double v : samples) {
        require(v >= 0.0 && v <= 1.0, ErrorCode::domain, "probability out of range");
    }
}

void MaskTraits::check(std::span<const std::uint8_t> samples) {
    for (auto v : samples) {
        require(v <= 1, ErrorCode::domain, "mask value not in {0,1}");
    }
}

const Grid3& grid_of(const AnyGrid& g) {
    return std::visit([](const auto& x) -> const Grid3& { return x.grid(); }, g);
}

SampleKind kind_of(const AnyGrid& g) {
    return std::visit([](const auto& x) { return std::decay_t<decltype(x)>::traits::kind; }, g);
}

void require_same_grid(const Grid3& a, const Grid3& b, std::string_view what) {
    require(a == b, ErrorCode::invalid_argument, "grid mismatch: " + std::string(what));
}

namespace {

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

template <class T>
std::string format_triple(const std::array<T, 3>& a) {
    std::string out;
    for (int i = 0; i < 3; ++i) {
        if (i) out += ' ';
        if constexpr (std::is_floating_point_v<T>)
            out += format_double(a[i]);
        else
            out += std::to_string(a[i]);
    }
    return out;
}

template <class T>
void append_le(std::string& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.append(bytes, sizeof(T));
}

template <class T>
T load_le(const char* p) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

[[noreturn]] void malformed(const std::string& detail) {
    fail(ErrorCode::format, "malformed header: " + detail);
}

class HeaderReader {
public:
    explicit HeaderReader(std::string_view bytes) : bytes_(bytes) {}

    std::string_view line() {
        auto nl = bytes_.find('\n', pos_);
        if (nl == std::string_view::npos) malformed("unterminated header line");
        std::string_view l = bytes_.substr(pos_, nl - pos_);
        pos_ = nl + 1;
        return l;
    }

    std::string_view field(std::string_view key) {
        std::string_view l = line();
        if (l.size() <= key.size() || l.substr(0, key.size()) != key || l[key.size()] != '=')
            malformed("expected '" + std::string(key) + "='");
        return l.substr(key.size() + 1);
    }

    [[nodiscard]] std::size_t offset() const noexcept { return pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

template <class T>
std::array<T, 3> parse_triple(std::string_view text, std::string_view key) {
    std::array<T, 3> out{};
    const char* p = text.data();
    const char* end = text.data() + text.size();
    for (int i = 0; i < 3; ++i) {
        if (i) {
            if (p == end || *p != ' ') malformed(std::string(key) + " needs three values");
            ++p;
        }
        auto res = std::from_chars(p, end, out[i]);
        if (res.ec != std::errc{}) malformed("bad number in " + std::string(key));
        p = res.ptr;
    }
    if (p != end) malformed("trailing characters in " + std::string(key));
    return out;
}

template <class G>
void encode_payload(std::string& out, const G& g) {
    using Traits = typename G::traits;
    for (auto v : g.samples()) {
        if constexpr (Traits::kind == SampleKind::volume) {
            append_le(out, static_cast<std::int16_t>(std::lround(v)));
        } else if constexpr (Traits::kind == SampleKind::probability) {
            append_le(out, static_cast<float>(v));
        } else {
            append_le(out, static_cast<std::uint8_t>(v));
        }
    }
}

} // namespace

std::string encode_grid(const AnyGrid& any) {
    return std::visit(
        [](const auto& g) {
            using Traits = typename std::decay_t<decltype(g)>::traits;
            const Grid3& grid = g.grid();
            std::string out = "VGF1\n";
            out += "dims=" + format_triple(grid.dims) + "\n";
            out += "spacing=" + format_triple(grid.spacing) + "\n";
            out += "origin=" + format_triple(grid.origin) + "\n";
            out += "dtype=" + std::string(Traits::dtype) + "\n";
            out += "end\n";
            encode_payload(out, g);
            return out;
        },
        any);
}

AnyGrid decode_grid(std::string_view bytes) {
    HeaderReader reader(bytes);
    if (bytes.substr(0, 5) != "VGF1\n") malformed("missing VGF1 magic");
    reader.line();
    Grid3 grid;
    grid.dims = parse_triple<std::int32_t>(reader.field("dims"), "dims");
    grid.spacing = parse_triple<double>(reader.field("spacing"), "spacing");
    grid.origin = parse_triple<double>(reader.field("origin"), "origin");
    std::string_view dtype = reader.field("dtype");
    if (reader.line() != "end") malformed("expected 'end'");
    try {
        grid.validate();
    } catch (const Error& e) {
        malformed(e.what());
    }

    const std::size_t n = grid.voxel_count();
    std::string_view payload = bytes.substr(reader.offset());
    auto expect_bytes = [&](std::size_t width) {
        if (payload.size() != n * width)
            fail(ErrorCode::format, "sample-count mismatch: header declares " + std::to_string(n) +
                                        " samples, payload holds " + std::to_string(payload.size()) +
                                        " bytes");
    };

    if (dtype == HuTraits::dtype) {
        expect_bytes(2);
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) s[i] = load_le<std::int16_t>(payload.data() + 2 * i);
        return Volume(grid, std::move(s));
    }
    if (dtype == ProbabilityTraits::dtype) {
        expect_bytes(4);
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) s[i] = load_le<float>(payload.data() + 4 * i);
        return ProbMap(grid, std::move(s));
    }
    if (dtype == MaskTraits::dtype) {
        expect_bytes(1);
        std::vector<std::uint8_t> s(payload.begin(), payload.end());
        return Mask(grid, std::move(s));
    }
    malformed("unknown dtype '" + std::string(dtype) + "'");
}

AnyGrid read_grid_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::io, "cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_grid(bytes);
    } catch (const Error& e) {
        throw Error(e.code(), path.string() + ": " + e.what());
    }
}

void write_grid_file(const AnyGrid& g, const std::filesystem::path& path) {
    const std::string bytes = encode_grid(g);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::io, "write failed: " + path.string());
}

bool inside_cells(const Grid3& grid, const Point3& c) noexcept {
    for (int a = 0; a < 3; ++a) {
        if (!(c[a] >= -0.5 && c[a] < grid.dims[a] - 0.5)) return false;
    }
    return true;
}

double interpolate_linear(const Grid3& grid, std::span<const double> samples, const Point3& c) noexcept {
    std::int64_t lo[3], hi[3];
    double w[3];
    for (int a = 0; a < 3; ++a) {
        const std::int64_t last = grid.dims[a] - 1;
        double x = std::clamp(c[a], 0.0, static_cast<double>(last));
        auto f = static_cast<std::int64_t>(std::floor(x));
        if (f >= last) f = std::max<std::int64_t>(last - 1, 0);
        lo[a] = f;
        hi[a] = std::min(f + 1, last);
        w[a] = x - static_cast<double>(f);
    }
    auto at = [&](std::int64_t i, std::int64_t j, std::int64_t k) { return samples[grid.index(i, j, k)]; };
    const double c00 = at(lo[0], lo[1], lo[2]) * (1 - w[0]) + at(hi[0], lo[1], lo[2]) * w[0];
    const double c10 = at(lo[0], hi[1], lo[2]) * (1 - w[0]) + at(hi[0], hi[1], lo[2]) * w[0];
    const double c01 = at(lo[0], lo[1], hi[2]) * (1 - w[0]) + at(hi[0], lo[1], hi[2]) * w[0];
    const double c11 = at(lo[0], hi[1], hi[2]) * (1 - w[0]) + at(hi[0], hi[1], hi[2]) * w[0];
    const double c0 = c00 * (1 - w[1]) + c10 * w[1];
    const double c1 = c01 * (1 - w[1]) + c11 * w[1];
    return c0 * (1 - w[2]) + c1 * w[2];
}

namespace {

template <class G>
typename G::value_type sample_nearest(const G& g, const Point3& c) {
    const Grid3& grid = g.grid();
    std::int64_t idx[3];
    for (int a = 0; a < 3; ++a) {
        idx[a] = std::clamp<std::int64_t>(std::llround(c[a]), 0, grid.dims[a] - 1);
    }
    return g(idx[0], idx[1], idx[2]);
}

template <class G>
double sample_scalar(const G& g, const Point3& mm, Interpolation mode, double fill) {
    const Point3 c = g.grid().continuous_index(mm);
    if (!inside_cells(g.grid(), c)) return fill;
    if (mode == Interpolation::nearest) return sample_nearest(g, c);
    return interpolate_linear(g.grid(), g.samples(), c);
}

} // namespace

double sample_at(const Volume& v, const Point3& mm, Interpolation mode, double fill) {
    return sample_scalar(v, mm, mode, fill);
}

double sample_at(const ProbMap& p, const Point3& mm, Interpolation mode, double fill) {
    return sample_scalar(p, mm, mode, fill);
}

std::uint8_t sample_at(const Mask& m, const Point3& mm) {
    const Point3 c = m.grid().continuous_index(mm);
    if (!inside_cells(m.grid(), c)) return 0;
    return sample_nearest(m, c);
}

} // namespace calcquant
