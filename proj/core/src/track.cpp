#include "hitl/track.hpp"

#include <algorithm>
#include <fstream>
#include <numbers>
#include <random>
#include <utility>

#include "hitl/error.hpp"

namespace hitl {

namespace {

constexpr double kSpacing = 1.0;
constexpr double kHalfWidth = 2.0;

// Resamples a dense polyline at fixed arc-length spacing.
std::vector<Vec2> resample(const std::vector<Vec2>& dense, double spacing, bool closed) {
  std::vector<Vec2> pts = dense;
  if (closed) pts.push_back(dense.front());
  std::vector<Vec2> out{pts.front()};
  double carried = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    Vec2 a = pts[i - 1];
    const Vec2 b = pts[i];
    double seg = distance(a, b);
    while (carried + seg >= spacing) {
      const double t = (spacing - carried) / seg;
      a = a + t * (b - a);
      out.push_back(a);
      seg = distance(a, b);
      carried = 0.0;
    }
    carried += seg;
  }
  // Drop a trailing point that would sit on top of the first one.
  if (closed && out.size() > 2 && distance(out.back(), out.front()) < 0.5 * spacing) out.pop_back();
  return out;
}

std::vector<Vec2> radial_loop(double radius, const std::vector<std::pair<int, double>>& harmonics,
                              const std::vector<double>& phases) {
  constexpr int kDense = 20000;
  std::vector<Vec2> dense;
  dense.reserve(kDense);
  for (int i = 0; i < kDense; ++i) {
    const double phi = 2.0 * std::numbers::pi * i / kDense;
    double r = radius;
    for (std::size_t h = 0; h < harmonics.size(); ++h) {
      r += radius * harmonics[h].second * std::sin(harmonics[h].first * phi + phases[h]);
    }
    dense.push_back({r * std::cos(phi), r * std::sin(phi)});
  }
  return dense;
}

// Rotates a closed loop so waypoint 0 lies on the rightmost point; keeps the
// start reproducible and away from harmonics' extremes.
void rotate_start(std::vector<Vec2>& pts) {
  auto it = std::max_element(pts.begin(), pts.end(), [](Vec2 a, Vec2 b) { return a.x < b.x; });
  std::rotate(pts.begin(), it, pts.end());
}

}  // namespace

double wrap_angle(double radians) {
  double a = std::remainder(radians, 2.0 * std::numbers::pi);
  if (a > std::numbers::pi) a -= 2.0 * std::numbers::pi;
  if (a < -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

void TrackSpec::validate() const {
  if (waypoints.size() < 2) throw ConfigError("track '" + name + "': needs at least 2 waypoints");
  if (!(half_width > 0.0) || !std::isfinite(half_width)) {
    throw ConfigError("track '" + name + "': half_width must be > 0");
  }
  const std::size_t n = waypoints.size();
  const std::size_t segments = closed ? n : n - 1;
  for (std::size_t i = 0; i < segments; ++i) {
    const Vec2 a = waypoints[i];
    const Vec2 b = waypoints[(i + 1) % n];
    if (!std::isfinite(a.x) || !std::isfinite(a.y)) {
      throw ConfigError("track '" + name + "': non-finite waypoint " + std::to_string(i));
    }
    const double gap = distance(a, b);
    if (gap == 0.0) {
      throw ConfigError("track '" + name + "': consecutive waypoints " + std::to_string(i) +
                        " and " + std::to_string((i + 1) % n) + " coincide");
    }
    if (gap > half_width) {
      throw ConfigError("track '" + name + "': waypoint spacing " + std::to_string(gap) +
                        " at index " + std::to_string(i) + " exceeds half_width");
    }
  }
  for (std::size_t k = 0; k < obstacles.size(); ++k) {
    const auto& o = obstacles[k];
    if (!(o.radius > 0.0)) throw ConfigError("track '" + name + "': obstacle radius must be > 0");
    if (distance(o.center, start_position()) <= o.radius) {
      throw ConfigError("track '" + name + "': obstacle " + std::to_string(k) + " overlaps the start pose");
    }
  }
}

double TrackSpec::start_heading() const {
  const Vec2 t = track_tangent(*this, 0);
  return std::atan2(t.y, t.x);
}

NearestWaypoint nearest_waypoint(Vec2 position, const TrackSpec& track) {
  if (track.waypoints.size() < 2) throw ConfigError("nearest_waypoint: track needs at least 2 waypoints");
  NearestWaypoint best{0, std::numeric_limits<double>::infinity()};
  double best_sq = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < track.waypoints.size(); ++i) {
    const Vec2 d = position - track.waypoints[i];
    const double sq = d.x * d.x + d.y * d.y;
    if (sq < best_sq) {
      best_sq = sq;
      best.index = i;
    }
  }
  best.distance = std::sqrt(best_sq);
  return best;
}

double nearest_waypoint_distance(Vec2 position, const TrackSpec& track) {
  return nearest_waypoint(position, track).distance;
}

Vec2 track_tangent(const TrackSpec& track, std::size_t index) {
  const auto& w = track.waypoints;
  const std::size_t n = w.size();
  Vec2 prev, next;
  if (track.closed) {
    prev = w[(index + n - 1) % n];
    next = w[(index + 1) % n];
  } else {
    prev = w[index == 0 ? 0 : index - 1];
    next = w[index + 1 >= n ? n - 1 : index + 1];
  }
  const Vec2 d = next - prev;
  const double len = norm(d);
  return {d.x / len, d.y / len};
}

bool inside_obstacle(Vec2 position, const TrackSpec& track) {
  return std::any_of(track.obstacles.begin(), track.obstacles.end(),
                     [&](const Obstacle& o) { return distance(position, o.center) < o.radius; });
}

double cast_ray(Vec2 origin, double bearing, const TrackSpec& track, double max_range) {
  const Vec2 dir{std::cos(bearing), std::sin(bearing)};
  const double r2 = track.half_width * track.half_width;
  const double reach = max_range + track.half_width;

  // Parameter intervals [t_in, t_out] along the ray for every corridor disc it crosses.
  std::vector<std::pair<double, double>> spans;
  spans.reserve(64);
  bool inside = false;
  for (const Vec2& c : track.waypoints) {
    const Vec2 rel = origin - c;
    const double c2 = dot(rel, rel);
    if (c2 > reach * reach) continue;
    const double b = dot(dir, rel);
    const double disc = b * b - (c2 - r2);
    if (disc < 0.0) continue;
    const double s = std::sqrt(disc);
    const double t_out = -b + s;
    if (t_out <= 0.0) continue;
    const double t_in = -b - s;
    if (c2 <= r2) inside = true;
    spans.emplace_back(t_in, t_out);
  }
  if (!inside) return 0.0;
  std::sort(spans.begin(), spans.end());
  double reach_t = 0.0;
  for (const auto& [t_in, t_out] : spans) {
    if (t_in > reach_t) break;
    reach_t = std::max(reach_t, t_out);
    if (reach_t >= max_range) break;
  }
  double free = std::min(reach_t, max_range);

  for (const auto& o : track.obstacles) {
    const Vec2 rel = origin - o.center;
    const double c2 = dot(rel, rel);
    if (c2 < o.radius * o.radius) return 0.0;
    const double b = dot(dir, rel);
    const double disc = b * b - (c2 - o.radius * o.radius);
    if (disc < 0.0) continue;
    const double t_in = -b - std::sqrt(disc);
    if (t_in > 0.0) free = std::min(free, t_in);
  }
  return free;
}

TrackSpec make_straight_track(std::uint64_t /*seed*/) {
  TrackSpec t;
  t.name = "straight";
  t.half_width = kHalfWidth;
  t.closed = false;
  for (int i = 0; i <= 400; ++i) t.waypoints.push_back({i * kSpacing, 0.0});
  return t;
}

TrackSpec make_loop_track(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> jitter(0.8, 1.2);
  const std::vector<std::pair<int, double>> harmonics{{2, 0.10 * jitter(rng)}, {3, 0.05 * jitter(rng)}};
  const std::vector<double> phases{phase(rng), phase(rng)};
  auto pts = resample(radial_loop(35.0, harmonics, phases), kSpacing, true);
  rotate_start(pts);
  TrackSpec t;
  t.name = "loop";
  t.half_width = kHalfWidth;
  t.closed = true;
  t.waypoints = std::move(pts);
  return t;
}

TrackSpec make_s_curve_track(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(0.9, 1.1);
  const double amplitude = 18.0 * jitter(rng);
  const double wavelength = 130.0 * jitter(rng);
  std::vector<Vec2> dense;
  constexpr int kDense = 30000;
  constexpr double kLength = 600.0;
  for (int i = 0; i <= kDense; ++i) {
    const double x = kLength * i / kDense;
    dense.push_back({x, amplitude * std::sin(2.0 * std::numbers::pi * x / wavelength)});
  }
  TrackSpec t;
  t.name = "s-curve";
  t.half_width = kHalfWidth;
  t.closed = false;
  t.waypoints = resample(dense, kSpacing, false);
  return t;
}

TrackSpec make_coastal_track(std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xC0A57A1ULL);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> jitter(0.85, 1.15);
  const std::vector<std::pair<int, double>> harmonics{
      {2, 0.12 * jitter(rng)}, {4, 0.04 * jitter(rng)}, {5, 0.025 * jitter(rng)}};
  const std::vector<double> phases{phase(rng), phase(rng), phase(rng)};
  auto pts = resample(radial_loop(45.0, harmonics, phases), kSpacing, true);
  rotate_start(pts);
  TrackSpec t;
  t.name = "coastal-like";
  t.half_width = kHalfWidth;
  t.closed = true;
  t.waypoints = std::move(pts);

  // Small boulders hugging alternating road edges; each leaves a passable gap.
  const std::size_t n = t.waypoints.size();
  for (int k = 1; k <= 3; ++k) {
    const std::size_t idx = n * k / 4;
    const Vec2 tan = track_tangent(t, idx);
    const Vec2 normal{-tan.y, tan.x};
    const double side = (k % 2 == 0) ? 1.0 : -1.0;
    t.obstacles.push_back({t.waypoints[idx] + (side * 1.5) * normal, 0.5});
  }
  return t;
}

bool is_builtin_track(std::string_view name) {
  return name == "straight" || name == "loop" || name == "s-curve" || name == "coastal-like";
}

TrackSpec resolve_track(std::string_view name_or_path, std::uint64_t seed) {
  if (name_or_path == "straight") return make_straight_track(seed);
  if (name_or_path == "loop") return make_loop_track(seed);
  if (name_or_path == "s-curve") return make_s_curve_track(seed);
  if (name_or_path == "coastal-like") return make_coastal_track(seed);
  return load_track(std::filesystem::path(name_or_path));
}

nlohmann::json track_to_json(const TrackSpec& track) {
  nlohmann::ordered_json j;
  j["schema"] = "hitl.track";
  j["v"] = 1;
  j["name"] = track.name;
  j["half_width"] = track.half_width;
  j["closed"] = track.closed;
  auto wps = nlohmann::json::array();
  for (const auto& w : track.waypoints) wps.push_back({w.x, w.y});
  j["waypoints"] = wps;
  auto obs = nlohmann::json::array();
  for (const auto& o : track.obstacles) obs.push_back({o.center.x, o.center.y, o.radius});
  j["obstacles"] = obs;
  return j;
}

TrackSpec track_from_json(const nlohmann::json& j) {
  TrackSpec t;
  try {
    t.name = j.value("name", std::string("custom"));
    t.half_width = j.at("half_width").get<double>();
    t.closed = j.value("closed", false);
    for (const auto& w : j.at("waypoints")) t.waypoints.push_back({w.at(0).get<double>(), w.at(1).get<double>()});
    if (j.contains("obstacles")) {
      for (const auto& o : j.at("obstacles")) {
        t.obstacles.push_back({{o.at(0).get<double>(), o.at(1).get<double>()}, o.at(2).get<double>()});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("track file: ") + e.what());
  }
  t.validate();
  return t;
}

void save_track(const TrackSpec& track, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw StorageError("cannot write track file: " + path.string());
  out << track_to_json(track).dump(1) << '\n';
}

TrackSpec load_track(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("track file not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("track file " + path.string() + ": " + e.what());
  }
  return track_from_json(j);
}

}  // namespace hitl
