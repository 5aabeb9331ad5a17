#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "calcquant/evaluate.hpp"
#include "calcquant/volgrid.hpp"

namespace calcquant::readerstudy {

constexpr double kMinSymdiffMm2 = 2.0;
constexpr double kWindowMm = 50.0;
constexpr int kNeighborhood = 10; ///< slices rendered on each side of the target
constexpr double kWindowLevel = 40.0;
constexpr double kWindowWidth = 850.0;
constexpr int kContourScale = 4; ///< output pixels per voxel edge

/// Sagittal half of an axial slice: left holds x indices below nx / 2.
enum class Side { left, right };
[[nodiscard]] const char* to_string(Side s) noexcept;
[[nodiscard]] Side parse_side(std::string_view s);

struct Scan {
    std::string participant_id;
    Volume image;
    Mask manual;
    Mask automated;
};

struct Region {
    std::string id;
    std::string participant_id;
    std::size_t scan = 0; ///< index into the scan list used for sampling
    std::int32_t slice = 0;
    Side side = Side::left;
    /// Voxel index of the window corner and its size in voxels (in-plane).
    std::array<std::int32_t, 2> window_origin{0, 0};
    std::array<std::int32_t, 2> window_size{0, 0};
    Point3 center_mm{0.0, 0.0, 0.0}; ///< centroid of the union of both masks
    std::size_t fp_pixels = 0;       ///< automated and not manual
    std::size_t fn_pixels = 0;       ///< manual and not automated
    double symdiff_mm2 = 0.0;
};

/// Every half-slice of one scan whose symmetric difference covers at least
/// 2 mm². Masks must share the image grid.
[[nodiscard]] std::vector<Region> eligible_regions(const Scan& scan, std::size_t scan_index);

/// Uniform draw without replacement, at most one region per participant.
/// Region ids are r001, r002, ... in draw order.
[[nodiscard]] std::vector<Region> sample_regions(std::span<const Scan> scans, std::size_t n,
                                                 std::uint64_t seed);
/// The same draw over a pool of eligible regions from any number of scans.
[[nodiscard]] std::vector<Region> sample_from_pool(std::vector<Region> pool, std::size_t n, std::uint64_t seed);

/// Loads scan i on demand, so large studies never hold every scan at once.
using ScanLoader = std::function<Scan(std::size_t)>;

struct KeyEntry {
    bool automated_is_blue = false;
    bool blue_on_left = false;
};

struct BlindingKey {
    std::uint64_t seed = 0;
    std::map<std::string, KeyEntry> entries;

    [[nodiscard]] const KeyEntry& at(const std::string& region_id) const;
};

[[nodiscard]] BlindingKey assign_blinding(std::span<const Region> regions, std::uint64_t seed);

/// Window/level grayscale in [0, 1].
[[nodiscard]] double gray_level(double hu) noexcept;

/// The 2K+1 slice neighborhood of a region, cut to the window. Voxels outside
/// the scan read as air and background.
struct Crop {
    Volume image;
    Mask manual;
    Mask automated;
};

[[nodiscard]] Crop extract_crop(const Scan& scan, const Region& region);

enum class Variant { plain, overlay, left, right };
[[nodiscard]] const char* to_string(Variant v) noexcept;
[[nodiscard]] Variant parse_variant(std::string_view s);

struct RgbImage {
    std::int32_t width = 0;
    std::int32_t height = 0;
    std::vector<std::uint8_t> pixels; ///< row-major RGB
};

/// One frame at a slice offset in [-K, K]. Contours follow voxel boundaries;
/// `left` and `right` show the contour assigned to that panel by the key.
[[nodiscard]] RgbImage render_frame(const Crop& crop, int offset, Variant variant, const KeyEntry& key);

[[nodiscard]] std::string encode_png(const RgbImage& image);

/// Grade relative to the blue contour, as the reader sees it.
enum class BlindGrade {
    blue_substantially_better,
    blue_slightly_better,
    equal,
    red_slightly_better,
    red_substantially_better,
};
[[nodiscard]] const char* to_string(BlindGrade g) noexcept;
[[nodiscard]] BlindGrade parse_blind_grade(std::string_view s);
/// +2 for "blue substantially better" down to -2.
[[nodiscard]] int blue_score(BlindGrade g) noexcept;
/// Score relative to the automated contour (+2: automated substantially better).
[[nodiscard]] int unblinded_score(BlindGrade g, const KeyEntry& key) noexcept;

struct GradeRecord {
    std::string region_id;
    std::optional<BlindGrade> grade;
    bool gradable = true;
    bool at_least_one_accurate = true;
    std::string timestamp; ///< UTC ISO-8601; filled on submission when empty
};

struct SubsetSummary {
    std::array<std::size_t, 5> counts{}; ///< scores +2, +1, 0, -1, -2
    std::optional<evaluate::WilcoxonResult> wilcoxon;
    std::string wilcoxon_error;
};

struct SessionSummary {
    std::size_t regions = 0;
    std::size_t graded = 0;
    bool partial = false;
    std::size_t ungradable = 0;
    std::size_t both_inaccurate = 0;
    SubsetSummary all;
    SubsetSummary false_positive; ///< regions without missed manual pixels
    SubsetSummary false_negative; ///< regions without extra automated pixels
};

[[nodiscard]] SessionSummary summarize(std::span<const Region> regions, const std::map<std::string, GradeRecord>& grades,
                                       const BlindingKey& key);
[[nodiscard]] std::string summary_json(const SessionSummary& s);

/// On-disk session: session.json (regions), key.json (never served),
/// grades.jsonl (append-only log) and crops/ (per-region neighborhoods).
class Session {
public:
    static Session create(const std::filesystem::path& dir, std::span<const Scan> scans, std::size_t n,
                          std::uint64_t seed);
    static Session create(const std::filesystem::path& dir, std::size_t scan_count, const ScanLoader& load,
                          std::size_t n, std::uint64_t seed);
    static Session open(const std::filesystem::path& dir);

    Session(Session&& other) noexcept;

    [[nodiscard]] const std::filesystem::path& dir() const noexcept { return dir_; }
    [[nodiscard]] const std::vector<Region>& regions() const noexcept { return regions_; }
    [[nodiscard]] const Region& region(const std::string& id) const;
    [[nodiscard]] bool has_key() const;
    [[nodiscard]] std::size_t graded_count() const;
    [[nodiscard]] std::optional<std::string> next_ungraded() const;
    [[nodiscard]] std::map<std::string, GradeRecord> grades() const;

    /// Returns true when an earlier grade was replaced.
    bool submit_grade(GradeRecord record, bool overwrite = false);

    [[nodiscard]] SessionSummary summarize() const;

    [[nodiscard]] Crop crop(const std::string& region_id) const;
    [[nodiscard]] std::string frame_png(const std::string& region_id, int offset, Variant variant) const;
    /// Which color each separate panel shows, for the frame manifest.
    [[nodiscard]] std::pair<std::string, std::string> panel_colors(const std::string& region_id) const;

private:
    Session() = default;
    void load_key();

    std::filesystem::path dir_;
    std::vector<Region> regions_;
    std::map<std::string, std::size_t> index_;
    std::optional<BlindingKey> key_;
    std::map<std::string, GradeRecord> grades_;
    mutable std::shared_mutex mutex_;
};

struct HttpResponse {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

/// Routes requests for the grading client. Blinded routes never reveal the
/// provenance of a contour; unblinding is only honored for local requests.
class Service {
public:
    explicit Service(Session& session) : session_(session) {}

    [[nodiscard]] HttpResponse handle(std::string_view method, std::string_view path,
                                      const std::map<std::string, std::string>& query, std::string_view body,
                                      bool local = true);

private:
    Session& session_;
};

/// cpp-httplib front end for Service. `bind` returns the bound port (a free
/// one when `port` is 0); `listen` blocks until `stop` is called.
class HttpServer {
public:
    explicit HttpServer(Session& session);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    int bind(const std::string& host, int port);
    /// Serves static files (the grading client) from `dir` at "/".
    void mount(const std::filesystem::path& dir);
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace calcquant::readerstudy
