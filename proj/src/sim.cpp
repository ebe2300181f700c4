#include "ttp/sim.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>

#include "ttp/config.hpp"
#include "ttp/rng.hpp"

namespace ttp::sim {

namespace {

constexpr std::array<CategorySpec, kNumCategories> kSpecs{{
    {Category::cup, "cup", {0.08, 0.10, 0.08}},
    {Category::glass, "glass", {0.07, 0.15, 0.07}},
    {Category::tray, "tray", {0.30, 0.03, 0.22}},
    {Category::small_bowl, "small_bowl", {0.12, 0.06, 0.12}},
    {Category::big_bowl, "big_bowl", {0.20, 0.09, 0.20}},
    {Category::small_plate, "small_plate", {0.18, 0.02, 0.18}},
    {Category::big_plate, "big_plate", {0.27, 0.025, 0.27}},
    {Category::door, "door", {0.60, 0.70, 0.05}},
    {Category::top_rack, "top_rack", {0.55, 0.20, 0.55}},
    {Category::bottom_rack, "bottom_rack", {0.55, 0.25, 0.55}},
}};

constexpr std::array<Category, kNumDishCategories> kDishCategories{
    Category::cup,       Category::glass,       Category::tray,      Category::small_bowl,
    Category::big_bowl,  Category::small_plate, Category::big_plate,
};

const CategorySpec& category_spec_table(Category c) { return kSpecs[static_cast<std::size_t>(c)]; }

// Plates and trays stand upright in a rack.
bool stands_upright(Category c) {
    return c == Category::tray || c == Category::small_plate || c == Category::big_plate;
}

const double kHalfSqrt2 = std::sqrt(0.5);

constexpr double kRackX0 = 0.1;
constexpr double kRackZ0 = 0.3;
constexpr double kSlotGap = 0.02;
constexpr double kTopRackY = 0.8;
constexpr double kBottomRackY = 0.4;
constexpr int kCounterColumns = 6;

constexpr double kCounterHeight = 0.9;

// Dishes rest with their center half their height above the surface.
Pose counter_pose(int cell, Category dish) {
    const int col = cell % kCounterColumns;
    const int row = cell / kCounterColumns;
    const double lift = 0.5 * category_spec_table(dish).bbox[1];
    return Pose{{-2.3 + 0.3 * col, kCounterHeight + lift, -0.45 + 0.3 * row}, {1.0, 0.0, 0.0, 0.0}};
}

[[noreturn]] void fail(SimErrorCode code, const std::string& what) { throw SimError(code, what); }

Rack rack_of_fixture(Category c) { return c == Category::top_rack ? Rack::top : Rack::bottom; }

void update_phase(SceneState& s) {
    if (!s.dynamic_phase && s.placements >= 1 && !s.door_open && !s.top_rack_out && !s.bottom_rack_out &&
        s.counter_dishes().empty()) {
        s.dynamic_phase = true;
    }
}

int first_free_counter_cell(const SceneState& s) {
    std::array<bool, kCounterCells> used{};
    for (const auto& d : s.dishes) {
        if (d.region == Region::counter) {
            used[d.counter_cell] = true;
        }
    }
    for (int cell : s.counter_order) {
        if (!used[cell]) {
            return cell;
        }
    }
    fail(SimErrorCode::InvalidConfig, "counter is full");
}

}  // namespace

const CategorySpec& category_spec(Category c) { return kSpecs[static_cast<std::size_t>(c)]; }

std::span<const Category> dish_categories() { return kDishCategories; }

bool is_dish(Category c) { return static_cast<int>(c) < kNumDishCategories; }

bool is_fixture(Category c) { return !is_dish(c); }

std::string_view category_name(Category c) { return category_spec(c).name; }

std::optional<Category> parse_category(std::string_view name) {
    for (const auto& spec : kSpecs) {
        if (spec.name == name) {
            return spec.category;
        }
    }
    return std::nullopt;
}

std::string_view rack_name(Rack r) { return r == Rack::top ? "top" : "bottom"; }

std::string_view region_name(Region r) {
    switch (r) {
        case Region::counter: return "counter";
        case Region::top_rack: return "top_rack";
        case Region::bottom_rack: return "bottom_rack";
        case Region::sink: return "sink";
    }
    return "?";
}

Region region_of(Rack r) { return r == Rack::top ? Region::top_rack : Region::bottom_rack; }

int fixture_id(Category fixture) {
    switch (fixture) {
        case Category::door: return kDoorId;
        case Category::top_rack: return kTopRackId;
        case Category::bottom_rack: return kBottomRackId;
        default: fail(SimErrorCode::UnknownId, "not a fixture category");
    }
}

int fixture_place_id(Category fixture, bool open) { return kFixturePlaceBase + 2 * fixture_id(fixture) + (open ? 1 : 0); }

int sink_place_id(Category dish) { return kSinkPlaceBase + static_cast<int>(dish); }

Pose fixture_pose(Category fixture, bool open) {
    switch (fixture) {
        case Category::door:
            return open ? Pose{{0.7, 0.05, 0.4}, {kHalfSqrt2, kHalfSqrt2, 0.0, 0.0}}
                        : Pose{{0.7, 0.45, 0.0}, {1.0, 0.0, 0.0, 0.0}};
        case Category::top_rack:
            return Pose{{0.7, kTopRackY, open ? 0.6 : -0.5}, {1.0, 0.0, 0.0, 0.0}};
        case Category::bottom_rack:
            return Pose{{0.7, kBottomRackY, open ? 0.6 : -0.5}, {1.0, 0.0, 0.0, 0.0}};
        default: fail(SimErrorCode::UnknownId, "not a fixture category");
    }
}

Pose sink_pose() { return Pose{{-1.2, 0.75, -0.9}, {1.0, 0.0, 0.0, 0.0}}; }

void validate_config(const SceneConfig& config) {
    if (config.n_per_rack < 3 || config.n_per_rack > 10) {
        fail(SimErrorCode::InvalidConfig, "n_per_rack must be in [3, 10]");
    }
    if (!(config.initial_fraction > 0.0) || config.initial_fraction > 1.0) {
        fail(SimErrorCode::InvalidConfig, "initial_fraction must be in (0, 1]");
    }
    if (config.slot_capacity < 10 || config.slot_capacity > 20) {
        fail(SimErrorCode::InvalidConfig, "slot_capacity must be in [10, 20]");
    }
}

bool Box::contains(const Vec3& p) const {
    for (int i = 0; i < 3; ++i) {
        if (p[i] < lo[i] - 1e-12 || p[i] > hi[i] + 1e-12) {
            return false;
        }
    }
    return true;
}

std::array<double, 2> SlotLibrary::footprint(Category dish) {
    const auto& bbox = category_spec(dish).bbox;
    return {bbox[0], stands_upright(dish) ? bbox[1] : bbox[2]};
}

SlotLibrary::SlotLibrary(int capacity) : capacity_(capacity) {
    const int columns = (capacity + 1) / 2;
    for (Rack rack : {Rack::top, Rack::bottom}) {
        const double y = rack == Rack::top ? kTopRackY : kBottomRackY;
        double band_z = kRackZ0;
        double max_x = kRackX0;
        for (Category c : kDishCategories) {
            const auto [fx, fz] = footprint(c);
            const double pitch_x = fx + kSlotGap;
            const double pitch_z = fz + kSlotGap;
            const int rows = (capacity + columns - 1) / columns;
            for (int i = 0; i < capacity; ++i) {
                const int col = i % columns;
                const int row = i / columns;
                Slot slot;
                slot.id = kSlotBase + static_cast<int>(slots_.size());
                slot.category = c;
                slot.rack = rack;
                slot.index = i;
                const double lift = 0.5 * (stands_upright(c) ? category_spec(c).bbox[0] : category_spec(c).bbox[1]);
                slot.pose.position = {kRackX0 + pitch_x * (col + 0.5), y + lift, band_z + pitch_z * (row + 0.5)};
                slot.pose.orientation = stands_upright(c) ? std::array<double, 4>{kHalfSqrt2, kHalfSqrt2, 0.0, 0.0}
                                                          : std::array<double, 4>{1.0, 0.0, 0.0, 0.0};
                slots_.push_back(slot);
            }
            max_x = std::max(max_x, kRackX0 + pitch_x * columns);
            band_z += pitch_z * rows;
        }
        regions_[static_cast<int>(rack)] = Box{{kRackX0, y, kRackZ0}, {max_x, y + 0.2, band_z}};
    }
}

std::span<const Slot> SlotLibrary::slots(Category dish, Rack rack) const {
    const std::size_t offset = (static_cast<std::size_t>(rack) * kNumDishCategories + static_cast<std::size_t>(dish)) *
                               static_cast<std::size_t>(capacity_);
    return std::span<const Slot>(slots_).subspan(offset, static_cast<std::size_t>(capacity_));
}

const Slot* SlotLibrary::find(int slot_id) const {
    const int index = slot_id - kSlotBase;
    if (index < 0 || index >= static_cast<int>(slots_.size())) {
        return nullptr;
    }
    return &slots_[static_cast<std::size_t>(index)];
}

std::shared_ptr<const SlotLibrary> slot_library(int capacity) {
    static std::mutex mutex;
    static std::map<int, std::shared_ptr<const SlotLibrary>> cache;
    std::lock_guard lock(mutex);
    auto& entry = cache[capacity];
    if (!entry) {
        entry = std::make_shared<const SlotLibrary>(capacity);
    }
    return entry;
}

const Dish* SceneState::find_dish(int id) const {
    const auto it = std::lower_bound(dishes.begin(), dishes.end(), id, [](const Dish& d, int v) { return d.id < v; });
    return it != dishes.end() && it->id == id ? &*it : nullptr;
}

std::vector<const Dish*> SceneState::counter_dishes() const {
    std::vector<const Dish*> out;
    for (const auto& d : dishes) {
        if (d.region == Region::counter) {
            out.push_back(&d);
        }
    }
    return out;
}

int SceneState::count_in(Region r) const {
    return static_cast<int>(std::count_if(dishes.begin(), dishes.end(), [r](const Dish& d) { return d.region == r; }));
}

bool SceneState::operator==(const SceneState& other) const {
    const int cap = library ? library->capacity() : 0;
    const int other_cap = other.library ? other.library->capacity() : 0;
    return step == other.step && dishes == other.dishes && door_open == other.door_open &&
           top_rack_out == other.top_rack_out && bottom_rack_out == other.bottom_rack_out &&
           slot_occupancy == other.slot_occupancy && pending_spawn_queue == other.pending_spawn_queue &&
           sink_contents == other.sink_contents && counter_order == other.counter_order &&
           next_dish_id == other.next_dish_id && placements == other.placements &&
           dynamic_phase == other.dynamic_phase && cap == other_cap;
}

std::string_view error_code_name(SimErrorCode code) {
    switch (code) {
        case SimErrorCode::InvalidConfig: return "InvalidConfig";
        case SimErrorCode::UnknownId: return "UnknownId";
        case SimErrorCode::NotPickable: return "NotPickable";
        case SimErrorCode::CategoryMismatch: return "CategoryMismatch";
        case SimErrorCode::OccupiedSlot: return "OccupiedSlot";
        case SimErrorCode::ClosedRack: return "ClosedRack";
        case SimErrorCode::RackBlocked: return "RackBlocked";
        case SimErrorCode::NotInDynamicPhase: return "NotInDynamicPhase";
        case SimErrorCode::EmptyQueue: return "EmptyQueue";
    }
    return "?";
}

SceneState init_scene(const SceneConfig& config) {
    validate_config(config);
    Rng rng(config.seed);
    SceneState s;
    s.library = slot_library(config.slot_capacity);

    const int total = 2 * config.n_per_rack;
    const int initial = std::clamp(static_cast<int>(std::ceil(config.initial_fraction * total - 1e-9)), 1, total);

    std::vector<Category> drawn;
    drawn.reserve(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) {
        drawn.push_back(kDishCategories[rng.index(kNumDishCategories)]);
    }
    s.counter_order.resize(kCounterCells);
    for (int i = 0; i < kCounterCells; ++i) {
        s.counter_order[static_cast<std::size_t>(i)] = i;
    }
    rng.shuffle(s.counter_order);

    for (int i = 0; i < initial; ++i) {
        Dish d;
        d.id = s.next_dish_id++;
        d.category = drawn[static_cast<std::size_t>(i)];
        d.region = Region::counter;
        d.counter_cell = s.counter_order[static_cast<std::size_t>(i)];
        d.pose = counter_pose(d.counter_cell, d.category);
        s.dishes.push_back(d);
    }
    s.pending_spawn_queue.assign(drawn.begin() + initial, drawn.end());
    return s;
}

std::vector<Instance> visible_instances(const SceneState& state) {
    std::vector<Instance> out;
    out.push_back({kDoorId, Category::door, fixture_pose(Category::door, state.door_open), state.step, false});
    out.push_back(
        {kTopRackId, Category::top_rack, fixture_pose(Category::top_rack, state.top_rack_out), state.step, false});
    out.push_back({kBottomRackId, Category::bottom_rack, fixture_pose(Category::bottom_rack, state.bottom_rack_out),
                   state.step, false});
    for (const auto& d : state.dishes) {
        if (d.region != Region::sink) {
            out.push_back({d.id, d.category, d.pose, state.step, false});
        }
    }
    return out;
}

std::vector<Instance> place_candidates(const SceneState& state, Category category) {
    std::vector<Instance> out;
    if (is_fixture(category)) {
        out.push_back({fixture_place_id(category, false), category, fixture_pose(category, false), state.step, true});
        out.push_back({fixture_place_id(category, true), category, fixture_pose(category, true), state.step, true});
        return out;
    }
    for (Rack rack : {Rack::top, Rack::bottom}) {
        if (!state.rack_out(rack)) {
            continue;
        }
        for (const auto& slot : state.library->slots(category, rack)) {
            out.push_back({slot.id, category, slot.pose, state.step, true});
        }
    }
    out.push_back({sink_place_id(category), category, sink_pose(), state.step, true});
    return out;
}

std::vector<int> pickable_ids(const SceneState& state) {
    std::vector<int> out{kDoorId, kTopRackId, kBottomRackId};
    for (const auto& d : state.dishes) {
        if (d.region == Region::counter) {
            out.push_back(d.id);
        }
    }
    return out;
}

Category category_of(const SceneState& state, int instance_id) {
    switch (instance_id) {
        case kDoorId: return Category::door;
        case kTopRackId: return Category::top_rack;
        case kBottomRackId: return Category::bottom_rack;
        default: break;
    }
    const Dish* d = state.find_dish(instance_id);
    if (d == nullptr || d->region == Region::sink) {
        fail(SimErrorCode::UnknownId, "unknown instance id " + std::to_string(instance_id));
    }
    return d->category;
}

SceneState apply_action(const SceneState& state, const Action& action) {
    const Category picked = category_of(state, action.pick_id);
    SceneState next = state;

    if (is_fixture(picked)) {
        if (action.place_id != fixture_place_id(picked, false) && action.place_id != fixture_place_id(picked, true)) {
            fail(SimErrorCode::UnknownId, "place id " + std::to_string(action.place_id) + " is not a pose of " +
                                              std::string(category_name(picked)));
        }
        const bool open = action.place_id == fixture_place_id(picked, true);
        if (picked == Category::door) {
            if (!open && (state.top_rack_out || state.bottom_rack_out)) {
                fail(SimErrorCode::RackBlocked, "cannot close the door while a rack is out");
            }
            next.door_open = open;
        } else {
            const Rack rack = rack_of_fixture(picked);
            if (open && !state.door_open) {
                fail(SimErrorCode::RackBlocked, "cannot pull out a rack while the door is closed");
            }
            (rack == Rack::top ? next.top_rack_out : next.bottom_rack_out) = open;
        }
    } else {
        const Dish* dish = state.find_dish(action.pick_id);
        if (dish->region != Region::counter) {
            fail(SimErrorCode::NotPickable, "dish " + std::to_string(action.pick_id) + " is not on the counter");
        }
        auto it = std::find_if(next.dishes.begin(), next.dishes.end(), [&](const Dish& d) { return d.id == dish->id; });
        if (action.place_id >= kSinkPlaceBase && action.place_id < kSinkPlaceBase + kNumDishCategories) {
            if (action.place_id != sink_place_id(picked)) {
                fail(SimErrorCode::CategoryMismatch, "sink place instance belongs to another category");
            }
            it->region = Region::sink;
            it->counter_cell = -1;
            it->pose = sink_pose();
            next.sink_contents.insert(it->id);
        } else {
            const Slot* slot = state.library->find(action.place_id);
            if (slot == nullptr) {
                fail(SimErrorCode::UnknownId, "unknown place id " + std::to_string(action.place_id));
            }
            if (slot->category != picked) {
                fail(SimErrorCode::CategoryMismatch, "slot " + std::to_string(slot->id) + " holds " +
                                                         std::string(category_name(slot->category)));
            }
            if (!state.rack_out(slot->rack)) {
                fail(SimErrorCode::ClosedRack, std::string(rack_name(slot->rack)) + " rack is not pulled out");
            }
            if (!state.slot_free(slot->id)) {
                fail(SimErrorCode::OccupiedSlot, "slot " + std::to_string(slot->id) + " is occupied");
            }
            it->region = region_of(slot->rack);
            it->counter_cell = -1;
            it->slot_id = slot->id;
            it->pose = slot->pose;
            next.slot_occupancy.emplace(slot->id, it->id);
        }
        ++next.placements;
    }
    ++next.step;
    update_phase(next);
    return next;
}

SceneState spawn_tick(const SceneState& state) {
    if (!state.dynamic_phase) {
        fail(SimErrorCode::NotInDynamicPhase, "initial loading is not complete");
    }
    if (state.pending_spawn_queue.empty()) {
        fail(SimErrorCode::EmptyQueue, "no dishes left to spawn");
    }
    SceneState next = state;
    Dish d;
    d.id = next.next_dish_id++;
    d.category = next.pending_spawn_queue.front();
    d.region = Region::counter;
    d.counter_cell = first_free_counter_cell(next);
    d.pose = counter_pose(d.counter_cell, d.category);
    next.pending_spawn_queue.erase(next.pending_spawn_queue.begin());
    next.dishes.push_back(d);
    return next;
}

bool is_terminal(const SceneState& state) {
    return state.pending_spawn_queue.empty() && state.counter_dishes().empty() && !state.door_open &&
           !state.top_rack_out && !state.bottom_rack_out;
}

StepResult env_step(const SceneState& state, const Action& action) {
    StepResult result{apply_action(state, action), 0};
    if (result.state.dynamic_phase && !result.state.pending_spawn_queue.empty()) {
        result.state = spawn_tick(result.state);
        result.spawns = 1;
    }
    return result;
}

nlohmann::json to_json(const Instance& instance) {
    return {{"id", instance.id},
            {"category", category_name(instance.category)},
            {"pose", {instance.pose.position[0], instance.pose.position[1], instance.pose.position[2],
                      instance.pose.orientation[0], instance.pose.orientation[1], instance.pose.orientation[2],
                      instance.pose.orientation[3]}},
            {"t", instance.timestep},
            {"is_place", instance.is_place}};
}

Instance instance_from_json(const nlohmann::json& j) {
    Instance instance;
    instance.id = j.at("id").get<int>();
    const auto category = parse_category(j.at("category").get<std::string>());
    if (!category) {
        throw std::invalid_argument("unknown category " + j.at("category").dump());
    }
    instance.category = *category;
    const auto& pose = j.at("pose");
    if (!pose.is_array() || pose.size() != 7) {
        throw std::invalid_argument("pose must have 7 entries");
    }
    for (std::size_t i = 0; i < 3; ++i) {
        instance.pose.position[i] = pose[i].get<double>();
    }
    for (std::size_t i = 0; i < 4; ++i) {
        instance.pose.orientation[i] = pose[3 + i].get<double>();
    }
    instance.timestep = j.at("t").get<int>();
    instance.is_place = j.at("is_place").get<bool>();
    return instance;
}

nlohmann::json to_json(const SceneConfig& config) {
    return {{"n_per_rack", config.n_per_rack},
            {"initial_fraction", config.initial_fraction},
            {"seed", config.seed},
            {"slot_capacity", config.slot_capacity}};
}

SceneConfig scene_config_from_json(const nlohmann::json& j) {
    SceneConfig config;
    config.n_per_rack = j.at("n_per_rack").get<int>();
    config.initial_fraction = j.at("initial_fraction").get<double>();
    config.seed = j.at("seed").get<std::uint64_t>();
    config.slot_capacity = j.at("slot_capacity").get<int>();
    return config;
}

nlohmann::json to_json(const SceneState& state) {
    nlohmann::json dishes = nlohmann::json::array();
    for (const auto& d : state.dishes) {
        dishes.push_back({{"id", d.id},
                          {"category", category_name(d.category)},
                          {"region", region_name(d.region)},
                          {"slot", d.slot_id},
                          {"cell", d.counter_cell},
                          {"pose", {d.pose.position[0], d.pose.position[1], d.pose.position[2], d.pose.orientation[0],
                                    d.pose.orientation[1], d.pose.orientation[2], d.pose.orientation[3]}}});
    }
    nlohmann::json occupancy = nlohmann::json::array();
    for (const auto& [slot, dish] : state.slot_occupancy) {
        occupancy.push_back({slot, dish});
    }
    nlohmann::json queue = nlohmann::json::array();
    for (Category c : state.pending_spawn_queue) {
        queue.push_back(category_name(c));
    }
    return {{"step", state.step},
            {"dishes", dishes},
            {"door_open", state.door_open},
            {"top_rack_out", state.top_rack_out},
            {"bottom_rack_out", state.bottom_rack_out},
            {"slot_occupancy", occupancy},
            {"pending_spawn_queue", queue},
            {"sink_contents", state.sink_contents},
            {"counter_order", state.counter_order},
            {"next_dish_id", state.next_dish_id},
            {"placements", state.placements},
            {"dynamic_phase", state.dynamic_phase},
            {"slot_capacity", state.library ? state.library->capacity() : 0}};
}

SceneConfig parse_scene_config(std::string_view text) {
    const auto kv = KeyValueConfig::parse(text);
    kv.reject_unknown({"n_per_rack", "initial_fraction", "seed", "slot_capacity"});
    SceneConfig config;
    config.n_per_rack = static_cast<int>(kv.get_int("n_per_rack", config.n_per_rack));
    config.initial_fraction = kv.get_double("initial_fraction", config.initial_fraction);
    config.seed = kv.get_uint("seed", config.seed);
    config.slot_capacity = static_cast<int>(kv.get_int("slot_capacity", config.slot_capacity));
    validate_config(config);
    return config;
}

std::string format_scene_config(const SceneConfig& config) {
    return "n_per_rack = " + std::to_string(config.n_per_rack) + "\n" +
           "initial_fraction = " + nlohmann::json(config.initial_fraction).dump() + "\n" +
           "seed = " + std::to_string(config.seed) + "\n" +
           "slot_capacity = " + std::to_string(config.slot_capacity) + "\n";
}

}  // namespace ttp::sim
