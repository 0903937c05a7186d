#pragma once

// Frames, demonstrations and their on-disk format.
//
// A demo directory holds, per frame k:
//   rgb_{k:04}.ppm    binary P6, 8-bit
//   depth_{k:04}.raw  row-major little-endian float32, meters
//   mask_{k:04}.pgm   binary P5, 0 = background, 255 = foreground
// plus one meta.json with intrinsics, per-frame tool pose and gripper command,
// image dimensions and a format version.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>

#include <json.hpp>

#include "condserv/camera.hpp"
#include "condserv/core.hpp"

namespace condserv {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class GripperCmd { Open, Closed };

inline const char* to_string(GripperCmd g) {
    return g == GripperCmd::Open ? "open" : "closed";
}

inline GripperCmd gripper_from_string(const std::string& s) {
    if (s == "open") return GripperCmd::Open;
    if (s == "closed") return GripperCmd::Closed;
    throw std::invalid_argument("unknown gripper command: " + s);
}

// One RGB-D observation. rgb channels live in [0,1]; depth is meters with 0
// meaning invalid; mask marks the demonstration's attention region (all false
// on live frames).
struct Frame {
    Image3f rgb;
    Image1f depth;
    MaskImage mask;
    CameraIntrinsics intrinsics;
    ToolPose tcp_pose;
    GripperCmd gripper = GripperCmd::Open;

    int width() const { return rgb.width; }
    int height() const { return rgb.height; }
};

inline void validate_frame(const Frame& f) {
    if (f.rgb.width <= 0 || f.rgb.height <= 0)
        throw std::invalid_argument("Frame: empty image");
    if (f.depth.width != f.rgb.width || f.depth.height != f.rgb.height ||
        f.mask.width != f.rgb.width || f.mask.height != f.rgb.height)
        throw std::invalid_argument("Frame: rgb/depth/mask dimensions differ");
    f.intrinsics.validate();
    for (float d : f.depth.data)
        if (!(d >= 0.f) || !std::isfinite(d))
            throw std::invalid_argument("Frame: depth must be finite and >= 0");
}

struct Demonstration {
    std::string id;
    std::vector<Frame> frames;

    static Demonstration make(std::string id, std::vector<Frame> frames) {
        Demonstration d;
        d.id = std::move(id);
        d.frames = std::move(frames);
        d.validate();
        return d;
    }

    void validate() const {
        if (frames.size() < 2)
            throw std::invalid_argument("Demonstration: needs at least 2 frames");
        const Frame& f0 = frames.front();
        for (const Frame& f : frames) {
            validate_frame(f);
            if (f.width() != f0.width() || f.height() != f0.height())
                throw std::invalid_argument("Demonstration: frame dimensions differ");
            if (f.intrinsics.fx != f0.intrinsics.fx || f.intrinsics.fy != f0.intrinsics.fy ||
                f.intrinsics.cx != f0.intrinsics.cx || f.intrinsics.cy != f0.intrinsics.cy)
                throw std::invalid_argument("Demonstration: intrinsics differ across frames");
        }
    }

    const Frame& first_frame() const { return frames.front(); }
};

struct DemoSet {
    std::vector<Demonstration> demos;

    static DemoSet make(std::vector<Demonstration> demos) {
        DemoSet s;
        s.demos = std::move(demos);
        s.validate();
        return s;
    }

    void validate() const {
        if (demos.empty()) throw std::invalid_argument("DemoSet: empty");
        std::set<std::string> ids;
        for (const auto& d : demos)
            if (!ids.insert(d.id).second)
                throw std::invalid_argument("DemoSet: duplicate id " + d.id);
    }
};

// ---------------------------------------------------------------------------
// I/O errors

struct DemoIoError : std::runtime_error {
    enum class Kind {
        Io,
        MissingMeta,
        MissingFile,
        CorruptDepth,
        CorruptImage,
        DimensionMismatch,
        UnknownVersion,
    };
    Kind kind;

    DemoIoError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

namespace detail {

inline std::string frame_name(const char* prefix, int k, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%04d.%s", prefix, k, ext);
    return buf;
}

inline void write_bytes(const fs::path& p, const std::string& bytes) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw DemoIoError(DemoIoError::Kind::Io, "cannot open for write: " + p.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DemoIoError(DemoIoError::Kind::Io, "write failed: " + p.string());
}

inline std::string read_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f)
        throw DemoIoError(DemoIoError::Kind::MissingFile, "cannot open: " + p.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return bytes;
}

inline std::uint8_t quantize8(float v) {
    float c = std::clamp(v, 0.f, 1.f);
    return static_cast<std::uint8_t>(std::lround(c * 255.f));
}

// Reads a PNM header token, skipping whitespace and '#' comments.
inline std::string pnm_token(const std::string& bytes, size_t& pos) {
    while (pos < bytes.size()) {
        char c = bytes[pos];
        if (c == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (std::isspace(static_cast<unsigned char>(c))) {
            ++pos;
        } else {
            break;
        }
    }
    size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
}

struct PnmImage {
    int width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> data;
};

inline PnmImage parse_pnm(const std::string& bytes, const std::string& magic_want,
                          const fs::path& ctx) {
    size_t pos = 0;
    std::string magic = pnm_token(bytes, pos);
    if (magic != magic_want)
        throw DemoIoError(DemoIoError::Kind::CorruptImage,
                          "bad magic in " + ctx.string() + ": " + magic);
    PnmImage img;
    img.channels = magic_want == "P6" ? 3 : 1;
    try {
        img.width = std::stoi(pnm_token(bytes, pos));
        img.height = std::stoi(pnm_token(bytes, pos));
        int maxval = std::stoi(pnm_token(bytes, pos));
        if (maxval != 255)
            throw DemoIoError(DemoIoError::Kind::CorruptImage,
                              "unsupported maxval in " + ctx.string());
    } catch (const DemoIoError&) {
        throw;
    } catch (const std::exception&) {
        throw DemoIoError(DemoIoError::Kind::CorruptImage, "bad header in " + ctx.string());
    }
    ++pos;  // single whitespace after maxval
    size_t need = static_cast<size_t>(img.width) * img.height * img.channels;
    if (bytes.size() - pos < need)
        throw DemoIoError(DemoIoError::Kind::CorruptImage, "truncated " + ctx.string());
    img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
    return img;
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline void save_demo(const Demonstration& demo, const fs::path& dir) {
    demo.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DemoIoError(DemoIoError::Kind::Io, "cannot create " + dir.string());

    const Frame& f0 = demo.frames.front();
    for (size_t k = 0; k < demo.frames.size(); ++k) {
        const Frame& f = demo.frames[k];
        int w = f.width(), h = f.height();

        std::string ppm = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
        ppm.reserve(ppm.size() + static_cast<size_t>(3) * w * h);
        for (float v : f.rgb.data) ppm.push_back(static_cast<char>(detail::quantize8(v)));
        detail::write_bytes(dir / detail::frame_name("rgb", static_cast<int>(k), "ppm"), ppm);

        std::string raw(static_cast<size_t>(4) * w * h, '\0');
        static_assert(sizeof(float) == 4);
        std::memcpy(raw.data(), f.depth.data.data(), raw.size());
        detail::write_bytes(dir / detail::frame_name("depth", static_cast<int>(k), "raw"), raw);

        std::string pgm = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
        pgm.reserve(pgm.size() + static_cast<size_t>(w) * h);
        for (auto b : f.mask.data) pgm.push_back(static_cast<char>(b ? 255 : 0));
        detail::write_bytes(dir / detail::frame_name("mask", static_cast<int>(k), "pgm"), pgm);
    }

    json meta;
    meta["version"] = "1";
    meta["width"] = f0.width();
    meta["height"] = f0.height();
    meta["intrinsics"] = {{"fx", f0.intrinsics.fx},
                          {"fy", f0.intrinsics.fy},
                          {"cx", f0.intrinsics.cx},
                          {"cy", f0.intrinsics.cy}};
    json frames = json::array();
    for (const Frame& f : demo.frames) {
        frames.push_back({{"tcp_pose", {f.tcp_pose.x, f.tcp_pose.y, f.tcp_pose.z, f.tcp_pose.theta}},
                          {"gripper", to_string(f.gripper)}});
    }
    meta["frames"] = frames;
    detail::write_bytes(dir / "meta.json", meta.dump(2) + "\n");
}

inline Demonstration load_demo(const fs::path& dir) {
    fs::path meta_path = dir / "meta.json";
    if (!fs::exists(meta_path))
        throw DemoIoError(DemoIoError::Kind::MissingMeta, "missing meta.json in " + dir.string());

    json meta;
    try {
        meta = json::parse(detail::read_bytes(meta_path));
    } catch (const json::exception& e) {
        throw DemoIoError(DemoIoError::Kind::Io,
                          "cannot parse " + meta_path.string() + ": " + e.what());
    }
    std::string version = meta.value("version", "");
    if (version != "1")
        throw DemoIoError(DemoIoError::Kind::UnknownVersion,
                          "unknown demo format version '" + version + "' in " + dir.string());

    int w = meta.at("width").get<int>();
    int h = meta.at("height").get<int>();
    CameraIntrinsics K;
    K.fx = meta.at("intrinsics").at("fx").get<double>();
    K.fy = meta.at("intrinsics").at("fy").get<double>();
    K.cx = meta.at("intrinsics").at("cx").get<double>();
    K.cy = meta.at("intrinsics").at("cy").get<double>();

    std::vector<Frame> frames;
    int n = static_cast<int>(meta.at("frames").size());
    for (int k = 0; k < n; ++k) {
        const json& fj = meta.at("frames").at(k);
        Frame f;
        f.intrinsics = K;
        f.tcp_pose.x = fj.at("tcp_pose").at(0).get<double>();
        f.tcp_pose.y = fj.at("tcp_pose").at(1).get<double>();
        f.tcp_pose.z = fj.at("tcp_pose").at(2).get<double>();
        f.tcp_pose.theta = fj.at("tcp_pose").at(3).get<double>();
        f.gripper = gripper_from_string(fj.at("gripper").get<std::string>());

        auto rgb_bytes = detail::read_bytes(dir / detail::frame_name("rgb", k, "ppm"));
        auto rgb = detail::parse_pnm(rgb_bytes, "P6", dir / detail::frame_name("rgb", k, "ppm"));
        if (rgb.width != w || rgb.height != h)
            throw DemoIoError(DemoIoError::Kind::DimensionMismatch,
                              "rgb dims mismatch in frame " + std::to_string(k));
        f.rgb = Image3f(w, h);
        for (size_t i = 0; i < rgb.data.size(); ++i)
            f.rgb.data[i] = static_cast<float>(rgb.data[i]) / 255.f;

        auto depth_path = dir / detail::frame_name("depth", k, "raw");
        auto raw = detail::read_bytes(depth_path);
        if (raw.size() != static_cast<size_t>(4) * w * h)
            throw DemoIoError(DemoIoError::Kind::CorruptDepth,
                              "depth byte length mismatch: " + depth_path.string());
        f.depth = Image1f(w, h);
        std::memcpy(f.depth.data.data(), raw.data(), raw.size());

        auto mask_bytes = detail::read_bytes(dir / detail::frame_name("mask", k, "pgm"));
        auto pgm =
            detail::parse_pnm(mask_bytes, "P5", dir / detail::frame_name("mask", k, "pgm"));
        if (pgm.width != w || pgm.height != h)
            throw DemoIoError(DemoIoError::Kind::DimensionMismatch,
                              "mask dims mismatch in frame " + std::to_string(k));
        f.mask = MaskImage(w, h);
        for (size_t i = 0; i < pgm.data.size(); ++i) f.mask.data[i] = pgm.data[i] > 127;

        frames.push_back(std::move(f));
    }

    return Demonstration::make(dir.filename().string(), std::move(frames));
}

}  // namespace condserv
