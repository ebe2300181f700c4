#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

// Abstract dishwasher-loading environment. Geometry is boxes and points only;
// every transition is a pure function of its inputs.
namespace ttp::sim {

enum class Category : std::uint8_t {
    cup,
    glass,
    tray,
    small_bowl,
    big_bowl,
    small_plate,
    big_plate,
    door,
    top_rack,
    bottom_rack,
};

inline constexpr int kNumDishCategories = 7;
inline constexpr int kNumCategories = 10;

using Vec3 = std::array<double, 3>;

struct CategorySpec {
    Category category;
    std::string_view name;
    Vec3 bbox;  // extents in meters
};

const CategorySpec& category_spec(Category c);
std::span<const Category> dish_categories();
bool is_dish(Category c);
bool is_fixture(Category c);
std::string_view category_name(Category c);
std::optional<Category> parse_category(std::string_view name);

struct Pose {
    Vec3 position{0.0, 0.0, 0.0};
    std::array<double, 4> orientation{1.0, 0.0, 0.0, 0.0};  // w, x, y, z

    bool operator==(const Pose&) const = default;
};

struct Instance {
    int id = -1;
    Category category = Category::cup;
    Pose pose;
    int timestep = 0;
    bool is_place = false;

    bool operator==(const Instance&) const = default;
};

enum class Rack : std::uint8_t { top, bottom };
enum class Region : std::uint8_t { counter, top_rack, bottom_rack, sink };

std::string_view rack_name(Rack r);
std::string_view region_name(Region r);
Region region_of(Rack r);

// Id layout: fixtures 0..2, dishes from 10, fixture place poses 100..105,
// per-category sink places 200..206, rack slots from 1000.
inline constexpr int kDoorId = 0;
inline constexpr int kTopRackId = 1;
inline constexpr int kBottomRackId = 2;
inline constexpr int kFirstDishId = 10;
inline constexpr int kFixturePlaceBase = 100;
inline constexpr int kSinkPlaceBase = 200;
inline constexpr int kSlotBase = 1000;

int fixture_id(Category fixture);
int fixture_place_id(Category fixture, bool open);
int sink_place_id(Category dish);
Pose fixture_pose(Category fixture, bool open);
Pose sink_pose();

struct SceneConfig {
    int n_per_rack = 6;
    double initial_fraction = 0.5;
    std::uint64_t seed = 0;
    int slot_capacity = 10;

    bool operator==(const SceneConfig&) const = default;
};

// Throws SimError(InvalidConfig) when out of bounds.
void validate_config(const SceneConfig& config);

struct Slot {
    int id = -1;
    Category category = Category::cup;
    Rack rack = Rack::top;
    int index = 0;  // fill order within (category, rack)
    Pose pose;
};

struct Box {
    Vec3 lo;
    Vec3 hi;
    bool contains(const Vec3& p) const;
};

// Deterministic per-category grid of placement poses over each rack.
class SlotLibrary {
public:
    explicit SlotLibrary(int capacity);

    int capacity() const { return capacity_; }
    std::span<const Slot> slots(Category dish, Rack rack) const;
    std::span<const Slot> all() const { return slots_; }
    const Slot* find(int slot_id) const;
    const Box& region(Rack rack) const { return regions_[static_cast<int>(rack)]; }
    // Footprint (x, z extents) a slot reserves for its category.
    static std::array<double, 2> footprint(Category dish);

private:
    int capacity_;
    std::vector<Slot> slots_;
    std::array<Box, 2> regions_{};
};

std::shared_ptr<const SlotLibrary> slot_library(int capacity);

struct Dish {
    int id = -1;
    Category category = Category::cup;
    Region region = Region::counter;
    int slot_id = -1;
    int counter_cell = -1;
    Pose pose;

    bool operator==(const Dish&) const = default;
};

struct SceneState {
    int step = 0;
    std::vector<Dish> dishes;  // ascending id, includes sink-resident dishes
    bool door_open = false;
    bool top_rack_out = false;
    bool bottom_rack_out = false;
    std::map<int, int> slot_occupancy;  // slot id -> dish id
    std::vector<Category> pending_spawn_queue;
    std::set<int> sink_contents;
    std::vector<int> counter_order;  // seeded order in which counter cells are used
    int next_dish_id = kFirstDishId;
    int placements = 0;
    bool dynamic_phase = false;
    std::shared_ptr<const SlotLibrary> library;

    bool rack_out(Rack r) const { return r == Rack::top ? top_rack_out : bottom_rack_out; }
    const Dish* find_dish(int id) const;
    std::vector<const Dish*> counter_dishes() const;
    int count_in(Region r) const;
    bool slot_free(int slot_id) const { return !slot_occupancy.contains(slot_id); }

    bool operator==(const SceneState& other) const;
};

struct Action {
    int pick_id = -1;
    int place_id = -1;

    bool operator==(const Action&) const = default;
};

enum class SimErrorCode {
    InvalidConfig,
    UnknownId,
    NotPickable,
    CategoryMismatch,
    OccupiedSlot,
    ClosedRack,
    RackBlocked,
    NotInDynamicPhase,
    EmptyQueue,
};

std::string_view error_code_name(SimErrorCode code);

class SimError : public std::runtime_error {
public:
    SimError(SimErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    SimErrorCode code() const { return code_; }

private:
    SimErrorCode code_;
};

inline constexpr int kCounterCells = 24;

SceneState init_scene(const SceneConfig& config);
std::vector<Instance> visible_instances(const SceneState& state);
std::vector<Instance> place_candidates(const SceneState& state, Category category);
SceneState apply_action(const SceneState& state, const Action& action);
SceneState spawn_tick(const SceneState& state);
bool is_terminal(const SceneState& state);

// Ids that may be picked: counter dishes and the three fixtures.
std::vector<int> pickable_ids(const SceneState& state);
// Category of a visible pickable instance; throws UnknownId.
Category category_of(const SceneState& state, int instance_id);

// One environment step: the action, then one spawn if the dynamic phase is
// active and dishes are queued.
struct StepResult {
    SceneState state;
    int spawns = 0;
};
StepResult env_step(const SceneState& state, const Action& action);

nlohmann::json to_json(const Instance& instance);
Instance instance_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SceneConfig& config);
SceneConfig scene_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SceneState& state);

// Plain-text "key = value" scene config (keys: n_per_rack, initial_fraction,
// seed, slot_capacity). Unknown keys are rejected.
SceneConfig parse_scene_config(std::string_view text);
std::string format_scene_config(const SceneConfig& config);

}  // namespace ttp::sim
