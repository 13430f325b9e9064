#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace hitl {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }
inline double distance(Vec2 a, Vec2 b) { return norm(a - b); }

/// Wraps an angle into [-pi, pi].
double wrap_angle(double radians);

struct Obstacle {
  Vec2 center;
  double radius = 0.0;
};

/// A driving corridor: the union of discs of radius half_width centred on the
/// waypoints, minus the obstacle discs.
///
/// Frame convention: heading is measured from +x towards +y and a positive
/// steering angle increases heading. "Left" of the vehicle is heading - pi/2,
/// which is the side a negative steering angle turns towards.
struct TrackSpec {
  std::string name;
  std::vector<Vec2> waypoints;
  double half_width = 2.0;
  std::vector<Obstacle> obstacles;
  bool closed = false;

  /// Throws ConfigError when the invariants do not hold.
  void validate() const;

  Vec2 start_position() const { return waypoints.front(); }
  double start_heading() const;
};

struct NearestWaypoint {
  std::size_t index = 0;
  double distance = 0.0;
};

/// Linear scan; ties go to the lowest index. Throws ConfigError for tracks
/// with fewer than two waypoints.
NearestWaypoint nearest_waypoint(Vec2 position, const TrackSpec& track);
double nearest_waypoint_distance(Vec2 position, const TrackSpec& track);

/// Unit tangent of the centreline at a waypoint (central difference, wrapped
/// for closed tracks, one-sided at the ends of open ones).
Vec2 track_tangent(const TrackSpec& track, std::size_t index);

bool inside_obstacle(Vec2 position, const TrackSpec& track);

/// Free distance along a ray before leaving the corridor or hitting an
/// obstacle, capped at max_range. Zero when the origin is already outside.
double cast_ray(Vec2 origin, double bearing, const TrackSpec& track, double max_range);

// Built-in generators. `straight` ignores the seed; the others perturb their
// geometry with it.
TrackSpec make_straight_track(std::uint64_t seed = 0);
TrackSpec make_loop_track(std::uint64_t seed = 0);
TrackSpec make_s_curve_track(std::uint64_t seed = 0);
TrackSpec make_coastal_track(std::uint64_t seed = 0);

/// Resolves a built-in name ("straight", "loop", "s-curve", "coastal-like")
/// or, failing that, loads the string as a track file path.
TrackSpec resolve_track(std::string_view name_or_path, std::uint64_t seed);
bool is_builtin_track(std::string_view name);

nlohmann::json track_to_json(const TrackSpec& track);
TrackSpec track_from_json(const nlohmann::json& j);
void save_track(const TrackSpec& track, const std::filesystem::path& path);
TrackSpec load_track(const std::filesystem::path& path);

}  // namespace hitl
