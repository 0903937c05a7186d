#pragma once

// Small shared vocabulary: vectors, 3x3 matrices, images, deterministic RNG.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace condserv {

inline constexpr double kPi = 3.14159265358979323846;

struct Vec2 {
    double x = 0.0, y = 0.0;

    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double dot(const Vec2& o) const { return x * o.x + y * o.y; }
    double norm() const { return std::sqrt(x * x + y * y); }
};

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        double n = norm();
        return n > 0 ? Vec3{x / n, y / n, z / n} : Vec3{};
    }
};

struct Mat3 {
    // Row-major.
    std::array<std::array<double, 3>, 3> m{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};

    static Mat3 identity() { return Mat3{}; }

    static Mat3 rot_z(double a) {
        Mat3 r;
        double c = std::cos(a), s = std::sin(a);
        r.m = {{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
        return r;
    }

    double& operator()(int r, int c) { return m[r][c]; }
    double operator()(int r, int c) const { return m[r][c]; }

    Vec3 operator*(const Vec3& v) const {
        return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
                m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
                m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
    }

    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += m[i][k] * o.m[k][j];
                r.m[i][j] = s;
            }
        return r;
    }

    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r.m[i][j] = m[j][i];
        return r;
    }

    double det() const {
        return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
               m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
               m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    }
};

inline double clamp_abs(double v, double limit) {
    return std::clamp(v, -limit, limit);
}

// Wrap an angle to (-pi, pi].
inline double wrap_angle(double a) {
    a = std::fmod(a, 2.0 * kPi);
    if (a > kPi) a -= 2.0 * kPi;
    if (a <= -kPi) a += 2.0 * kPi;
    return a;
}

inline double angle_diff(double a, double b) { return wrap_angle(a - b); }

// ---------------------------------------------------------------------------
// Images. Row-major, pixel (x, y) with y the row index.

struct Image3f {
    int width = 0, height = 0;
    std::vector<float> data;  // 3 * width * height, rgb interleaved

    Image3f() = default;
    Image3f(int w, int h, float fill = 0.f)
        : width(w), height(h), data(static_cast<size_t>(3) * w * h, fill) {}

    float* px(int x, int y) { return &data[(static_cast<size_t>(y) * width + x) * 3]; }
    const float* px(int x, int y) const {
        return &data[(static_cast<size_t>(y) * width + x) * 3];
    }
    bool in_bounds(int x, int y) const {
        return x >= 0 && x < width && y >= 0 && y < height;
    }
};

struct Image1f {
    int width = 0, height = 0;
    std::vector<float> data;

    Image1f() = default;
    Image1f(int w, int h, float fill = 0.f)
        : width(w), height(h), data(static_cast<size_t>(w) * h, fill) {}

    float& at(int x, int y) { return data[static_cast<size_t>(y) * width + x]; }
    float at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }
};

struct MaskImage {
    int width = 0, height = 0;
    std::vector<std::uint8_t> data;

    MaskImage() = default;
    MaskImage(int w, int h, bool fill = false)
        : width(w), height(h), data(static_cast<size_t>(w) * h, fill ? 1 : 0) {}

    bool at(int x, int y) const { return data[static_cast<size_t>(y) * width + x] != 0; }
    void set(int x, int y, bool v) { data[static_cast<size_t>(y) * width + x] = v ? 1 : 0; }
    size_t count() const {
        size_t n = 0;
        for (auto b : data) n += b != 0;
        return n;
    }
};

// Bilinear sample of an rgb image at a fractional position. Caller must ensure
// x in [0, w-1], y in [0, h-1].
inline void bilinear_rgb(const Image3f& img, double x, double y, float out[3]) {
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    x0 = std::clamp(x0, 0, img.width - 1);
    y0 = std::clamp(y0, 0, img.height - 1);
    int x1 = std::min(x0 + 1, img.width - 1);
    int y1 = std::min(y0 + 1, img.height - 1);
    double fx = x - x0, fy = y - y0;
    const float* p00 = img.px(x0, y0);
    const float* p10 = img.px(x1, y0);
    const float* p01 = img.px(x0, y1);
    const float* p11 = img.px(x1, y1);
    for (int c = 0; c < 3; ++c) {
        double top = p00[c] * (1 - fx) + p10[c] * fx;
        double bot = p01[c] * (1 - fx) + p11[c] * fx;
        out[c] = static_cast<float>(top * (1 - fy) + bot * fy);
    }
}

// ---------------------------------------------------------------------------
// Deterministic RNG. std::mt19937_64 has a standardized sequence; the
// distributions below are hand-rolled so streams are reproducible across
// standard libraries.

class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double u01() { return (engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) {
        if (hi <= lo) return lo;
        return lo + (hi - lo) * u01();
    }

    // Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) return 0;
        return static_cast<std::uint64_t>(u01() * static_cast<double>(n));
    }

    bool bernoulli(double p) { return u01() < p; }

    // Box-Muller, one value per call with caching.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do { u1 = u01(); } while (u1 <= 0.0);
        double u2 = u01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * kPi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// splitmix64 step, used to derive independent child seeds.
inline std::uint64_t mix_seed(std::uint64_t s) {
    s += 0x9E3779B97F4A7C15ULL;
    s = (s ^ (s >> 30)) * 0xBF58476D1CE4E5B9ULL;
    s = (s ^ (s >> 27)) * 0x94D049BB133111EBULL;
    return s ^ (s >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index,
                                 std::uint64_t salt = 0) {
    return mix_seed(mix_seed(master ^ mix_seed(index)) ^ mix_seed(salt ^ 0xA5A5A5A5ULL));
}

}  // namespace condserv
