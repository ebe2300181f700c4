#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ttp/train.hpp"

namespace ttp::eval {

// Edit-distance alphabet: instance ids abstracted to (kind, category, region).
enum class SymbolRegion : std::uint8_t { counter, top_rack, bottom_rack, sink, fixture_open, fixture_closed };

struct Symbol {
    bool place = false;
    sim::Category category = sim::Category::cup;
    SymbolRegion region = SymbolRegion::counter;

    bool operator==(const Symbol&) const = default;
};

std::string to_string(const Symbol& s);

// Pick and place symbols of a legal action taken from `state`.
std::pair<Symbol, Symbol> action_symbols(const sim::SceneState& state, const sim::Action& action);

// Symbols of a recorded session, from replaying it.
std::vector<Symbol> session_symbols(const expert::Session& session);

template <class T>
std::size_t levenshtein(const std::vector<T>& a, const std::vector<T>& b) {
    std::vector<std::size_t> row(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) {
        row[j] = j;
    }
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
            diag = up;
        }
    }
    return row[b.size()];
}

// max(0, 1 - levenshtein / |expert|). Throws std::invalid_argument on an
// empty expert sequence.
template <class T>
double inverse_edit_distance(const std::vector<T>& policy, const std::vector<T>& expert) {
    if (expert.empty()) {
        throw std::invalid_argument("inverse_edit_distance: empty expert sequence");
    }
    const double ld = static_cast<double>(levenshtein(policy, expert)) / static_cast<double>(expert.size());
    return std::max(0.0, 1.0 - ld);
}

// 1/2 (a_hat / max(a_hat, a) + b_hat / max(b_hat, b)); a rack with nothing
// expected and nothing placed scores 1. With a = b = 0 the result is 1 when
// the policy placed no dish at all, else 0.
double packing_efficiency(int a_hat, int b_hat, int a, int b, int placed_total);

// PE * l / max(l, p).
double temporal_efficiency(double pe, int expert_steps, int policy_steps);

// Dishes on each rack whose category belongs to that rack in `pref`.
std::array<int, 2> consistent_counts(const sim::SceneState& state, const expert::Preference& pref);

struct Query {
    const sim::SceneState* state = nullptr;
    const std::vector<std::vector<sim::Instance>>* history = nullptr;  // earlier visible states, oldest first
    std::vector<sim::Instance> current;                                 // visible state (+ candidates on place)
    std::vector<int> eligible;                                          // ids, non-empty
    bool place = false;
    int picked = -1;  // set on place queries
};

using Policy = std::function<int(const Query&)>;

// Scores with the trained model conditioned on `prompt`; slot means. `params`
// must outlive the policy.
Policy model_policy(const model::Params& params, const model::ModelConfig& cfg, const expert::Session& prompt,
                    int context_window);
// The scripted expert for `pref`.
Policy oracle_policy(const expert::Preference& pref);
// Uniform choice over the eligible ids.
Policy random_policy(std::uint64_t seed);

struct RolloutStep {
    bool place = false;
    std::vector<int> eligible;
    int chosen = -1;
    bool legal = true;
    std::string error;  // simulator error code on an illegal choice
};

struct RolloutRecord {
    sim::SceneConfig scene_config;
    std::vector<RolloutStep> decisions;
    std::vector<sim::Action> actions;  // executed actions
    std::vector<Symbol> symbols;
    std::vector<Symbol> expert_symbols;
    sim::SceneState final_state;
    int a_hat = 0;
    int b_hat = 0;
    int a = 0;
    int b = 0;
    int placed_total = 0;
    int policy_steps = 0;  // executed and failed steps
    int failed_steps = 0;
    int expert_steps = 0;
    bool truncated = false;
    bool aborted = false;
    bool terminal = false;

    double pe() const;
    double ed() const;
    double te() const;
    nlohmann::json to_json() const;
};

inline constexpr int kDefaultMaxSteps = 80;

// Alternates pick and place queries from the initial scene of `config`. An
// illegal choice is recorded, counted as a step and the place query repeated
// once without that candidate; a second failure ends the episode. The
// reference counts and step count come from the expert for `reference`.
RolloutRecord rollout(const Policy& policy, const sim::SceneConfig& config, const expert::Preference& reference,
                      int max_steps = kDefaultMaxSteps);

struct Summary {
    double pe = 0.0;
    double pe_std = 0.0;
    double ed = 0.0;
    double te = 0.0;
    double consistency = 0.0;  // consistent share of placed dishes
    int sessions = 0;

    nlohmann::json to_json() const;
};

Summary summarize(const std::vector<RolloutRecord>& records);

// One evaluation scene: the preference to prompt and the scene to solve.
struct Scene {
    int preference_id = 0;
    sim::SceneConfig config;
};

// Held-out scenes of a dataset, in (preference, session) order.
std::vector<Scene> scenes_of(const data::Dataset& dataset);

enum class PolicyKind { model, oracle, random };
std::string_view policy_name(PolicyKind kind);
std::optional<PolicyKind> parse_policy(std::string_view name);

struct EvalSpec {
    PolicyKind policy = PolicyKind::model;
    int context_window = 0;
    int max_steps = kDefaultMaxSteps;
    std::uint64_t seed = 0;
};

// Rolls out every scene. Model policies are prompted with `prompts` (by
// preference id); references use `preferences`.
std::vector<RolloutRecord> evaluate(const model::Params* params, const model::ModelConfig* cfg,
                                    const std::map<int, expert::Session>& prompts,
                                    const std::map<int, expert::Preference>& preferences,
                                    const std::vector<Scene>& scenes, const EvalSpec& spec);

// Seeded prompt session per preference from the training data.
std::map<int, expert::Session> choose_prompts(const data::Dataset& train_set, std::uint64_t seed);

enum class AblationSuite { attributes, context_window, num_demos, num_prefs };
std::optional<AblationSuite> parse_suite(std::string_view name);
std::string_view suite_name(AblationSuite suite);

struct AblationCell {
    std::string label;
    tok::AttributeMask mask;
    int context_window = 0;
    int num_demos = 0;  // sessions per preference; 0 keeps all
    int num_prefs = 0;  // preferences; 0 keeps all
};

// The 8 on/off combinations of pose, category and time (role stays on),
// from all-on to none.
std::vector<AblationCell> attribute_grid();

struct AblationRow {
    AblationCell cell;
    Summary summary;
    double accuracy = 0.0;
    int best_epoch = 0;
    nlohmann::json to_json() const;
};

struct AblationInputs {
    data::Dataset train_set;
    data::Dataset validation_set;
    data::Dataset test_set;  // scenes to roll out, same preferences as training
    model::ModelConfig model_cfg;
    train::TrainConfig train_cfg;
    int max_steps = kDefaultMaxSteps;
};

using RowCallback = std::function<void(const AblationRow&)>;

std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& grid, const AblationInputs& inputs,
                                      const RowCallback& on_row = {});

// Tab-separated table with a header line.
std::string format_table(const std::vector<AblationRow>& rows);

}  // namespace ttp::eval
