#include "calcquant/readerstudy.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <unordered_set>

#include <json.hpp>
#include <png.h>

#include "calcquant/csv.hpp"
#include "calcquant/rng.hpp"

namespace calcquant::readerstudy {

using nlohmann::json;

const char* to_string(Side s) noexcept { return s == Side::left ? "left" : "right"; }

Side parse_side(std::string_view s) {
    if (s == "left") return Side::left;
    if (s == "right") return Side::right;
    fail(ErrorCode::format, "unknown side '" + std::string(s) + "'");
}

std::vector<Region> eligible_regions(const Scan& scan, std::size_t scan_index) {
    const Grid3& g = scan.image.grid();
    require_same_grid(g, scan.manual.grid(), "manual mask must share the image grid");
    require_same_grid(g, scan.automated.grid(), "automated mask must share the image grid");
    const double pixel_mm2 = g.spacing[0] * g.spacing[1];
    const std::int32_t mid = g.dims[0] / 2;
    const std::array<std::int32_t, 2> window{
        std::max<std::int32_t>(1, static_cast<std::int32_t>(std::lround(kWindowMm / g.spacing[0]))),
        std::max<std::int32_t>(1, static_cast<std::int32_t>(std::lround(kWindowMm / g.spacing[1])))};
    std::vector<Region> out;
    for (std::int32_t k = 0; k < g.dims[2]; ++k)
        for (Side side : {Side::left, Side::right}) {
            const std::int32_t i_lo = side == Side::left ? 0 : mid;
            const std::int32_t i_hi = side == Side::left ? mid : g.dims[0];
            std::size_t fp = 0, fn = 0, uni = 0;
            double si = 0.0, sj = 0.0;
            for (std::int32_t j = 0; j < g.dims[1]; ++j)
                for (std::int32_t i = i_lo; i < i_hi; ++i) {
                    const bool m = scan.manual(i, j, k) != 0, a = scan.automated(i, j, k) != 0;
                    fp += a && !m;
                    fn += m && !a;
                    if (m || a) {
                        ++uni;
                        si += i;
                        sj += j;
                    }
                }
            const double area = static_cast<double>(fp + fn) * pixel_mm2;
            if (area < kMinSymdiffMm2) continue;
            Region r;
            r.participant_id = scan.participant_id;
            r.scan = scan_index;
            r.slice = k;
            r.side = side;
            r.fp_pixels = fp;
            r.fn_pixels = fn;
            r.symdiff_mm2 = area;
            const double ci = si / static_cast<double>(uni), cj = sj / static_cast<double>(uni);
            r.center_mm = g.position(ci, cj, k);
            r.window_size = window;
            r.window_origin = {static_cast<std::int32_t>(std::lround(ci)) - window[0] / 2,
                               static_cast<std::int32_t>(std::lround(cj)) - window[1] / 2};
            out.push_back(std::move(r));
        }
    return out;
}

std::vector<Region> sample_regions(std::span<const Scan> scans, std::size_t n, std::uint64_t seed) {
    std::vector<Region> pool;
    for (std::size_t s = 0; s < scans.size(); ++s) {
        auto e = eligible_regions(scans[s], s);
        pool.insert(pool.end(), std::make_move_iterator(e.begin()), std::make_move_iterator(e.end()));
    }
    return sample_from_pool(std::move(pool), n, seed);
}

std::vector<Region> sample_from_pool(std::vector<Region> pool, std::size_t n, std::uint64_t seed) {
    require(n >= 1, ErrorCode::invalid_argument, "region count must be positive");
    std::unordered_set<std::string> participants;
    for (const auto& r : pool) participants.insert(r.participant_id);
    require(participants.size() >= n, ErrorCode::domain,
            "fewer than " + std::to_string(n) + " eligible regions (" + std::to_string(participants.size()) +
                " participants with an eligible region)");
    // Shuffling the whole pool and keeping each participant's first region
    // draws uniformly among regions subject to the one-per-participant cap.
    Rng rng(seed);
    for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.index(i)]);
    std::vector<Region> out;
    std::unordered_set<std::string> taken;
    const std::size_t width = std::max<std::size_t>(3, std::to_string(n).size());
    for (auto& r : pool) {
        if (out.size() == n) break;
        if (!taken.insert(r.participant_id).second) continue;
        std::string num = std::to_string(out.size() + 1);
        r.id = "r" + std::string(width - num.size(), '0') + num;
        out.push_back(std::move(r));
    }
    return out;
}

const KeyEntry& BlindingKey::at(const std::string& region_id) const {
    const auto it = entries.find(region_id);
    require(it != entries.end(), ErrorCode::not_found, "blinding key has no entry for region '" + region_id + "'");
    return it->second;
}

BlindingKey assign_blinding(std::span<const Region> regions, std::uint64_t seed) {
    BlindingKey key;
    key.seed = seed;
    Rng rng(seed);
    for (const auto& r : regions) {
        KeyEntry e;
        e.automated_is_blue = rng.coin();
        e.blue_on_left = rng.coin();
        require(key.entries.emplace(r.id, e).second, ErrorCode::invalid_argument, "duplicate region id '" + r.id + "'");
    }
    return key;
}

double gray_level(double hu) noexcept {
    return std::clamp((hu - (kWindowLevel - kWindowWidth / 2.0)) / kWindowWidth, 0.0, 1.0);
}

Crop extract_crop(const Scan& scan, const Region& region) {
    const Grid3& g = scan.image.grid();
    require(region.slice >= 0 && region.slice < g.dims[2], ErrorCode::invalid_argument, "region out of bounds");
    Grid3 cg;
    cg.dims = {region.window_size[0], region.window_size[1], 2 * kNeighborhood + 1};
    cg.spacing = g.spacing;
    cg.origin = g.position(region.window_origin[0], region.window_origin[1], region.slice - kNeighborhood);
    cg.validate();
    std::vector<double> hu(cg.voxel_count(), HuTraits::fill);
    std::vector<std::uint8_t> man(cg.voxel_count(), 0), aut(cg.voxel_count(), 0);
    for (std::int32_t w = 0; w < cg.dims[2]; ++w)
        for (std::int32_t v = 0; v < cg.dims[1]; ++v)
            for (std::int32_t u = 0; u < cg.dims[0]; ++u) {
                const std::int64_t i = region.window_origin[0] + u, j = region.window_origin[1] + v,
                                   k = region.slice - kNeighborhood + w;
                if (i < 0 || j < 0 || k < 0 || i >= g.dims[0] || j >= g.dims[1] || k >= g.dims[2]) continue;
                const std::size_t src = g.index(i, j, k), dst = cg.index(u, v, w);
                hu[dst] = scan.image[src];
                man[dst] = scan.manual[src];
                aut[dst] = scan.automated[src];
            }
    return {Volume(cg, std::move(hu)), Mask(cg, std::move(man)), Mask(cg, std::move(aut))};
}

const char* to_string(Variant v) noexcept {
    switch (v) {
    case Variant::plain: return "plain";
    case Variant::overlay: return "overlay";
    case Variant::left: return "left";
    case Variant::right: return "right";
    }
    return "plain";
}

Variant parse_variant(std::string_view s) {
    for (Variant v : {Variant::plain, Variant::overlay, Variant::left, Variant::right})
        if (s == to_string(v)) return v;
    fail(ErrorCode::invalid_argument, "unknown frame variant '" + std::string(s) + "'");
}

namespace {

constexpr std::array<std::uint8_t, 3> kBlue{40, 120, 255};
constexpr std::array<std::uint8_t, 3> kRed{255, 40, 40};

/// Marks the output pixels on the boundary of `mask` within slice `w`.
std::vector<std::uint8_t> contour_layer(const Mask& mask, std::int32_t w) {
    const Grid3& g = mask.grid();
    const std::int32_t nx = g.dims[0], ny = g.dims[1], s = kContourScale, width = nx * s;
    std::vector<std::uint8_t> layer(static_cast<std::size_t>(width) * ny * s, 0);
    auto on = [&](std::int32_t u, std::int32_t v) {
        return u >= 0 && v >= 0 && u < nx && v < ny && mask(u, v, w) != 0;
    };
    auto mark = [&](std::int32_t x, std::int32_t y) { layer[static_cast<std::size_t>(y) * width + x] = 1; };
    for (std::int32_t v = 0; v < ny; ++v)
        for (std::int32_t u = 0; u < nx; ++u) {
            if (!on(u, v)) continue;
            for (std::int32_t t = 0; t < s; ++t) {
                if (!on(u - 1, v)) mark(u * s, v * s + t);
                if (!on(u + 1, v)) mark(u * s + s - 1, v * s + t);
                if (!on(u, v - 1)) mark(u * s + t, v * s);
                if (!on(u, v + 1)) mark(u * s + t, v * s + s - 1);
            }
        }
    return layer;
}

} // namespace

RgbImage render_frame(const Crop& crop, int offset, Variant variant, const KeyEntry& key) {
    require(offset >= -kNeighborhood && offset <= kNeighborhood, ErrorCode::invalid_argument,
            "slice offset out of range");
    const Grid3& g = crop.image.grid();
    const std::int32_t w = offset + kNeighborhood, s = kContourScale;
    RgbImage img;
    img.width = g.dims[0] * s;
    img.height = g.dims[1] * s;
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    for (std::int32_t y = 0; y < img.height; ++y)
        for (std::int32_t x = 0; x < img.width; ++x) {
            const auto level = static_cast<std::uint8_t>(std::lround(255.0 * gray_level(crop.image(x / s, y / s, w))));
            const std::size_t p = (static_cast<std::size_t>(y) * img.width + x) * 3;
            img.pixels[p] = img.pixels[p + 1] = img.pixels[p + 2] = level;
        }
    if (variant == Variant::plain) return img;
    const Mask& blue = key.automated_is_blue ? crop.automated : crop.manual;
    const Mask& red = key.automated_is_blue ? crop.manual : crop.automated;
    std::vector<std::uint8_t> b, r;
    if (variant == Variant::overlay) {
        b = contour_layer(blue, w);
        r = contour_layer(red, w);
    } else {
        const bool show_blue = (variant == Variant::left) == key.blue_on_left;
        (show_blue ? b : r) = contour_layer(show_blue ? blue : red, w);
    }
    for (std::int32_t y = 0; y < img.height; ++y)
        for (std::int32_t x = 0; x < img.width; ++x) {
            const std::size_t n = static_cast<std::size_t>(y) * img.width + x;
            const bool in_b = !b.empty() && b[n], in_r = !r.empty() && r[n];
            if (!in_b && !in_r) continue;
            // Shared edges alternate colors so both outlines stay visible.
            const auto& c = in_b && in_r ? ((x + y) % 2 ? kRed : kBlue) : (in_b ? kBlue : kRed);
            std::copy(c.begin(), c.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>(n * 3));
        }
    return img;
}

std::string encode_png(const RgbImage& image) {
    require(image.width > 0 && image.height > 0 &&
                image.pixels.size() == static_cast<std::size_t>(image.width) * image.height * 3,
            ErrorCode::invalid_argument, "image buffer does not match its size");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(png != nullptr, ErrorCode::io, "cannot initialise PNG writer");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        fail(ErrorCode::io, "cannot initialise PNG writer");
    }
    std::string out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(ErrorCode::io, "PNG encoding failed");
    }
    png_set_write_fn(
        png, &out,
        [](png_structp p, png_bytep data, png_size_t len) {
            static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(data), len);
        },
        nullptr);
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_write_info(png, info);
    for (std::int32_t y = 0; y < image.height; ++y)
        png_write_row(png, const_cast<png_bytep>(image.pixels.data() + static_cast<std::size_t>(y) * image.width * 3));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

const char* to_string(BlindGrade g) noexcept {
    switch (g) {
    case BlindGrade::blue_substantially_better: return "blue_substantially_better";
    case BlindGrade::blue_slightly_better: return "blue_slightly_better";
    case BlindGrade::equal: return "equal";
    case BlindGrade::red_slightly_better: return "red_slightly_better";
    case BlindGrade::red_substantially_better: return "red_substantially_better";
    }
    return "equal";
}

BlindGrade parse_blind_grade(std::string_view s) {
    for (BlindGrade g : {BlindGrade::blue_substantially_better, BlindGrade::blue_slightly_better, BlindGrade::equal,
                         BlindGrade::red_slightly_better, BlindGrade::red_substantially_better})
        if (s == to_string(g)) return g;
    fail(ErrorCode::invalid_argument, "unknown grade '" + std::string(s) + "'");
}

int blue_score(BlindGrade g) noexcept { return 2 - static_cast<int>(g); }

int unblinded_score(BlindGrade g, const KeyEntry& key) noexcept {
    return key.automated_is_blue ? blue_score(g) : -blue_score(g);
}

namespace {

void add_score(SubsetSummary& s, int score) { ++s.counts[static_cast<std::size_t>(2 - score)]; }

void finish(SubsetSummary& s) {
    const auto grades = evaluate::grades_from_counts(s.counts);
    try {
        s.wilcoxon = evaluate::wilcoxon_signed_rank(grades);
    } catch (const Error& e) {
        s.wilcoxon_error = e.what();
    }
}

constexpr std::array<const char*, 5> kUnblindedNames{
    "automated_substantially_better", "automated_slightly_better", "equal", "manual_slightly_better",
    "manual_substantially_better"};

json subset_json(const SubsetSummary& s) {
    json counts = json::object();
    std::size_t n = 0;
    for (std::size_t c = 0; c < 5; ++c) {
        counts[kUnblindedNames[c]] = s.counts[c];
        n += s.counts[c];
    }
    json j{{"n", n}, {"counts", counts}};
    if (s.wilcoxon)
        j["wilcoxon"] = {{"n", s.wilcoxon->n}, {"w_plus", s.wilcoxon->w_plus}, {"z", s.wilcoxon->z}, {"p", s.wilcoxon->p}};
    else
        j["wilcoxon"] = nullptr;
    if (!s.wilcoxon_error.empty()) j["wilcoxon_error"] = s.wilcoxon_error;
    return j;
}

} // namespace

SessionSummary summarize(std::span<const Region> regions, const std::map<std::string, GradeRecord>& grades,
                         const BlindingKey& key) {
    SessionSummary s;
    s.regions = regions.size();
    for (const auto& r : regions) {
        const auto it = grades.find(r.id);
        if (it == grades.end()) continue;
        ++s.graded;
        const GradeRecord& g = it->second;
        if (!g.gradable || !g.grade) {
            ++s.ungradable;
            continue;
        }
        if (!g.at_least_one_accurate) ++s.both_inaccurate;
        const int score = unblinded_score(*g.grade, key.at(r.id));
        add_score(s.all, score);
        if (r.fn_pixels == 0) add_score(s.false_positive, score);
        if (r.fp_pixels == 0) add_score(s.false_negative, score);
    }
    s.partial = s.graded < s.regions;
    finish(s.all);
    finish(s.false_positive);
    finish(s.false_negative);
    return s;
}

std::string summary_json(const SessionSummary& s) {
    json j{{"regions", s.regions},
           {"graded", s.graded},
           {"partial", s.partial},
           {"ungradable", s.ungradable},
           {"both_inaccurate", s.both_inaccurate},
           {"all", subset_json(s.all)},
           {"false_positive_regions", subset_json(s.false_positive)},
           {"false_negative_regions", subset_json(s.false_negative)}};
    return j.dump();
}

namespace {

json region_to_json(const Region& r) {
    return {{"id", r.id},
            {"participant_id", r.participant_id},
            {"scan", r.scan},
            {"slice", r.slice},
            {"side", to_string(r.side)},
            {"window_origin", r.window_origin},
            {"window_size", r.window_size},
            {"center_mm", r.center_mm},
            {"fp_pixels", r.fp_pixels},
            {"fn_pixels", r.fn_pixels},
            {"symdiff_mm2", r.symdiff_mm2}};
}

Region region_from_json(const json& j) {
    Region r;
    r.id = j.at("id").get<std::string>();
    r.participant_id = j.at("participant_id").get<std::string>();
    r.scan = j.at("scan").get<std::size_t>();
    r.slice = j.at("slice").get<std::int32_t>();
    r.side = parse_side(j.at("side").get<std::string>());
    r.window_origin = j.at("window_origin").get<std::array<std::int32_t, 2>>();
    r.window_size = j.at("window_size").get<std::array<std::int32_t, 2>>();
    r.center_mm = j.at("center_mm").get<Point3>();
    r.fp_pixels = j.at("fp_pixels").get<std::size_t>();
    r.fn_pixels = j.at("fn_pixels").get<std::size_t>();
    r.symdiff_mm2 = j.at("symdiff_mm2").get<double>();
    return r;
}

json grade_to_json(const GradeRecord& g, bool overwrite) {
    return {{"region_id", g.region_id},
            {"grade", g.grade ? json(to_string(*g.grade)) : json(nullptr)},
            {"gradable", g.gradable},
            {"at_least_one_accurate", g.at_least_one_accurate},
            {"timestamp", g.timestamp},
            {"overwrite", overwrite}};
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::filesystem::path crop_path(const std::filesystem::path& dir, const std::string& id, const char* what) {
    return dir / "crops" / (id + "." + what + ".vgf");
}

} // namespace

Session::Session(Session&& other) noexcept
    : dir_(std::move(other.dir_)), regions_(std::move(other.regions_)), index_(std::move(other.index_)),
      key_(std::move(other.key_)), grades_(std::move(other.grades_)) {}

Session Session::create(const std::filesystem::path& dir, std::span<const Scan> scans, std::size_t n,
                        std::uint64_t seed) {
    return create(dir, scans.size(), [&](std::size_t i) { return scans[i]; }, n, seed);
}

Session Session::create(const std::filesystem::path& dir, std::size_t scan_count, const ScanLoader& load,
                        std::size_t n, std::uint64_t seed) {
    require(!std::filesystem::exists(dir / "session.json"), ErrorCode::state,
            "session already exists in " + dir.string());
    std::vector<Region> pool;
    for (std::size_t i = 0; i < scan_count; ++i) {
        auto e = eligible_regions(load(i), i);
        pool.insert(pool.end(), std::make_move_iterator(e.begin()), std::make_move_iterator(e.end()));
    }
    Session s;
    s.dir_ = dir;
    s.regions_ = sample_from_pool(std::move(pool), n, seed);
    const BlindingKey key = assign_blinding(s.regions_, stream_seed(seed, 1));
    std::filesystem::create_directories(dir / "crops");
    json regions = json::array();
    std::map<std::size_t, std::vector<std::size_t>> by_scan;
    for (std::size_t i = 0; i < s.regions_.size(); ++i) {
        const Region& r = s.regions_[i];
        s.index_[r.id] = i;
        regions.push_back(region_to_json(r));
        by_scan[r.scan].push_back(i);
    }
    for (const auto& [scan, members] : by_scan) {
        const Scan loaded = load(scan);
        for (std::size_t i : members) {
            const Region& r = s.regions_[i];
            const Crop c = extract_crop(loaded, r);
            write_grid_file(c.image, crop_path(dir, r.id, "image"));
            write_grid_file(c.manual, crop_path(dir, r.id, "manual"));
            write_grid_file(c.automated, crop_path(dir, r.id, "automated"));
        }
    }
    json entries = json::object();
    for (const auto& [id, e] : key.entries)
        entries[id] = {{"automated_is_blue", e.automated_is_blue}, {"blue_on_left", e.blue_on_left}};
    csv::write_file_atomic(dir / "key.json", json{{"seed", key.seed}, {"entries", entries}}.dump(2) + "\n");
    csv::write_file_atomic(dir / "session.json",
                           json{{"version", 1}, {"seed", seed}, {"regions", regions}}.dump(2) + "\n");
    std::ofstream(dir / "grades.jsonl", std::ios::app);
    s.key_ = key;
    return s;
}

Session Session::open(const std::filesystem::path& dir) {
    Session s;
    s.dir_ = dir;
    try {
        const json j = json::parse(csv::read_text_file(dir / "session.json"));
        for (const auto& r : j.at("regions")) {
            s.regions_.push_back(region_from_json(r));
            require(s.index_.emplace(s.regions_.back().id, s.regions_.size() - 1).second, ErrorCode::format,
                    "duplicate region id in session.json");
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::format, std::string("session.json: ") + e.what());
    }
    s.load_key();
    std::ifstream log(dir / "grades.jsonl");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(log, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const json g = json::parse(line);
            GradeRecord rec;
            rec.region_id = g.at("region_id").get<std::string>();
            require(s.index_.count(rec.region_id) == 1, ErrorCode::format,
                    "grades.jsonl line " + std::to_string(lineno) + ": unknown region");
            if (!g.at("grade").is_null()) rec.grade = parse_blind_grade(g.at("grade").get<std::string>());
            rec.gradable = g.at("gradable").get<bool>();
            rec.at_least_one_accurate = g.at("at_least_one_accurate").get<bool>();
            rec.timestamp = g.value("timestamp", "");
            const bool overwrite = g.value("overwrite", false);
            if (overwrite || s.grades_.count(rec.region_id) == 0) s.grades_[rec.region_id] = std::move(rec);
        } catch (const json::exception& e) {
            fail(ErrorCode::format, "grades.jsonl line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return s;
}

void Session::load_key() {
    const auto path = dir_ / "key.json";
    if (!std::filesystem::exists(path)) return;
    try {
        const json j = json::parse(csv::read_text_file(path));
        BlindingKey key;
        key.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& [id, e] : j.at("entries").items())
            key.entries[id] = {e.at("automated_is_blue").get<bool>(), e.at("blue_on_left").get<bool>()};
        for (const auto& r : regions_) (void)key.at(r.id);
        key_ = std::move(key);
    } catch (const json::exception& e) {
        fail(ErrorCode::format, std::string("key.json: ") + e.what());
    }
}

const Region& Session::region(const std::string& id) const {
    const auto it = index_.find(id);
    require(it != index_.end(), ErrorCode::not_found, "unknown region '" + id + "'");
    return regions_[it->second];
}

bool Session::has_key() const { return key_.has_value(); }

std::size_t Session::graded_count() const {
    std::shared_lock lock(mutex_);
    return grades_.size();
}

std::optional<std::string> Session::next_ungraded() const {
    std::shared_lock lock(mutex_);
    for (const auto& r : regions_)
        if (grades_.count(r.id) == 0) return r.id;
    return std::nullopt;
}

std::map<std::string, GradeRecord> Session::grades() const {
    std::shared_lock lock(mutex_);
    return grades_;
}

bool Session::submit_grade(GradeRecord record, bool overwrite) {
    (void)region(record.region_id);
    require(!record.gradable || record.grade.has_value(), ErrorCode::invalid_argument,
            "a gradable region needs a grade");
    if (record.timestamp.empty()) record.timestamp = utc_now();
    std::unique_lock lock(mutex_);
    const bool existed = grades_.count(record.region_id) == 1;
    require(!existed || overwrite, ErrorCode::state, "already graded");
    std::ofstream log(dir_ / "grades.jsonl", std::ios::app);
    require(static_cast<bool>(log), ErrorCode::io, "cannot append to grades.jsonl");
    log << grade_to_json(record, overwrite).dump() << '\n';
    log.flush();
    require(static_cast<bool>(log), ErrorCode::io, "cannot append to grades.jsonl");
    grades_[record.region_id] = std::move(record);
    return existed;
}

SessionSummary Session::summarize() const {
    require(key_.has_value(), ErrorCode::state, "blinding key file is missing");
    std::shared_lock lock(mutex_);
    return readerstudy::summarize(regions_, grades_, *key_);
}

Crop Session::crop(const std::string& region_id) const {
    (void)region(region_id);
    return {read_grid_file_as<Volume>(crop_path(dir_, region_id, "image")),
            read_grid_file_as<Mask>(crop_path(dir_, region_id, "manual")),
            read_grid_file_as<Mask>(crop_path(dir_, region_id, "automated"))};
}

std::string Session::frame_png(const std::string& region_id, int offset, Variant variant) const {
    require(key_.has_value(), ErrorCode::state, "blinding key file is missing");
    return encode_png(render_frame(crop(region_id), offset, variant, key_->at(region_id)));
}

std::pair<std::string, std::string> Session::panel_colors(const std::string& region_id) const {
    require(key_.has_value(), ErrorCode::state, "blinding key file is missing");
    const bool blue_left = key_->at(region_id).blue_on_left;
    return {blue_left ? "blue" : "red", blue_left ? "red" : "blue"};
}

} // namespace calcquant::readerstudy
