#include "occ/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "occ/parallel.hpp"

namespace occ::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using num::Tape;
using num::Tensor;

namespace {

std::string shortest(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

void write_text_file(const std::string& path, const std::string& content) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << content;
    if (!out) throw IoError("failed writing " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
    if (j.contains(key)) return j.at(key).get<T>();
    return fallback;
}

}  // namespace

// ---------------------------------------------------------------- RunConfig

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("config parse error: ") + e.what());
    }
    RunConfig c;
    c.seed = get_or<uint64_t>(j, "seed", c.seed);
    c.dataset_root = get_or<std::string>(j, "dataset_root", "");
    c.checkpoint_dir = get_or<std::string>(j, "checkpoint_dir", "");
    c.stages = get_or<std::vector<int>>(j, "stages", c.stages);
    c.batch_size = get_or<int>(j, "batch_size", c.batch_size);
    c.learning_rate = get_or<double>(j, "learning_rate", c.learning_rate);
    c.weight_decay = get_or<double>(j, "weight_decay", c.weight_decay);
    c.threads = get_or<int>(j, "threads", c.threads);

    if (j.contains("clip_train")) {
        const json& t = j.at("clip_train");
        c.clip_train.steps = get_or<int>(t, "steps", c.clip_train.steps);
        c.clip_train.batch_size = get_or<int>(t, "batch_size", c.clip_train.batch_size);
        c.clip_train.learning_rate = get_or<double>(t, "learning_rate", c.clip_train.learning_rate);
    }
    if (j.contains("clip")) {
        const json& t = j.at("clip");
        c.clip.embed_dim = get_or<int>(t, "embed_dim", c.clip.embed_dim);
        c.clip.hidden = get_or<int>(t, "hidden", c.clip.hidden);
        c.clip.temperature_init = get_or<double>(t, "temperature_init", c.clip.temperature_init);
    }
    if (j.contains("fusion")) {
        const json& t = j.at("fusion");
        c.fusion.alpha = get_or<double>(t, "alpha", c.fusion.alpha);
        c.fusion.n_tokens = get_or<int>(t, "n_tokens", c.fusion.n_tokens);
        c.fusion.d_model = get_or<int>(t, "d_model", c.fusion.d_model);
        c.fusion.embed_dim = get_or<int>(t, "embed_dim", c.fusion.embed_dim);
    }
    if (j.contains("lm")) {
        const json& t = j.at("lm");
        c.lm.layers = get_or<int>(t, "layers", c.lm.layers);
        c.lm.heads = get_or<int>(t, "heads", c.lm.heads);
        c.lm.d_model = get_or<int>(t, "d_model", c.lm.d_model);
        c.lm.mlp_hidden = get_or<int>(t, "mlp_hidden", c.lm.mlp_hidden);
        c.lm.max_len = get_or<int>(t, "max_len", c.lm.max_len);
    }
    if (j.contains("recon")) {
        const json& t = j.at("recon");
        c.recon.feature_dim = get_or<int>(t, "feature_dim", c.recon.feature_dim);
        c.recon.sdf_hidden = get_or<int>(t, "sdf_hidden", c.recon.sdf_hidden);
        c.recon.pe_frequencies = get_or<int>(t, "pe_frequencies", c.recon.pe_frequencies);
        c.recon.grid_resolution = get_or<int>(t, "grid_resolution", c.recon.grid_resolution);
    }
    if (j.contains("stage1")) {
        const json& t = j.at("stage1");
        if (t.contains("learning_rate")) c.stage1.learning_rate = t.at("learning_rate").get<double>();
        c.stage1.epochs = get_or<int>(t, "epochs", c.stage1.epochs);
    }
    if (j.contains("stage2")) {
        const json& t = j.at("stage2");
        if (t.contains("learning_rate")) c.stage2.learning_rate = t.at("learning_rate").get<double>();
        c.stage2.steps = get_or<int>(t, "steps", c.stage2.steps);
        c.stage2.points_per_scene = get_or<int>(t, "points_per_scene", c.stage2.points_per_scene);
        c.stage2.scenes_per_batch = get_or<int>(t, "scenes_per_batch", c.stage2.scenes_per_batch);
        c.stage2.near_surface_fraction =
            get_or<double>(t, "near_surface_fraction", c.stage2.near_surface_fraction);
        c.stage2.mask_loss_weight = get_or<double>(t, "mask_loss_weight", c.stage2.mask_loss_weight);
        c.stage2.extractor_lr_scale = get_or<double>(t, "extractor_lr_scale", c.stage2.extractor_lr_scale);
        c.stage2.final_lr_fraction = get_or<double>(t, "final_lr_fraction", c.stage2.final_lr_fraction);
    }
    if (j.contains("decode")) {
        const json& t = j.at("decode");
        c.decode.strategy = get_or<std::string>(t, "strategy", c.decode.strategy);
        c.decode.beam_width = get_or<int>(t, "beam_width", c.decode.beam_width);
        c.decode.max_new = get_or<int>(t, "max_new", c.decode.max_new);
        c.decode.temperature = get_or<double>(t, "temperature", c.decode.temperature);
        c.decode.seed = get_or<uint64_t>(t, "seed", c.decode.seed);
        c.decode.length_normalize = get_or<bool>(t, "length_normalize", c.decode.length_normalize);
    }
    if (j.contains("tta")) {
        const json& t = j.at("tta");
        c.tta.k = get_or<int>(t, "k", c.tta.k);
        c.tta.steps = get_or<int>(t, "steps", c.tta.steps);
        c.tta.learning_rate = get_or<double>(t, "learning_rate", c.tta.learning_rate);
        c.tta.temperature = get_or<double>(t, "temperature", c.tta.temperature);
        c.tta.scope = tta::scope_from_name(get_or<std::string>(t, "scope", tta::scope_name(c.tta.scope)));
        c.tta.leave_one_out = get_or<bool>(t, "leave_one_out", c.tta.leave_one_out);
        c.tta.cumulative = get_or<bool>(t, "cumulative", c.tta.cumulative);
        c.tta.max_new = get_or<int>(t, "max_new", c.tta.max_new);
        c.tta.beam_width = get_or<int>(t, "beam_width", c.tta.beam_width);
    }
    if (j.contains("eval")) {
        const json& t = j.at("eval");
        c.eval.mode = get_or<std::string>(t, "mode", c.eval.mode);
        c.eval.grade_substring = get_or<bool>(t, "grade_substring", c.eval.grade_substring);
        if (t.contains("rescue_reference_increment"))
            c.eval.rescue_reference_increment = t.at("rescue_reference_increment").get<double>();
    }
    c.fusion.validate();
    return c;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    return from_json_text(read_text_file(path));
}

std::string RunConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["dataset_root"] = dataset_root;
    j["checkpoint_dir"] = checkpoint_dir;
    j["stages"] = stages;
    j["batch_size"] = batch_size;
    j["learning_rate"] = learning_rate;
    j["weight_decay"] = weight_decay;
    j["threads"] = threads;
    j["clip_train"] = {{"steps", clip_train.steps},
                       {"batch_size", clip_train.batch_size},
                       {"learning_rate", clip_train.learning_rate}};
    j["clip"] = {{"embed_dim", clip.embed_dim},
                 {"hidden", clip.hidden},
                 {"temperature_init", clip.temperature_init}};
    j["fusion"] = {{"alpha", fusion.alpha},
                   {"n_tokens", fusion.n_tokens},
                   {"d_model", fusion.d_model},
                   {"embed_dim", fusion.embed_dim}};
    j["lm"] = {{"layers", lm.layers},
               {"heads", lm.heads},
               {"d_model", lm.d_model},
               {"mlp_hidden", lm.mlp_hidden},
               {"max_len", lm.max_len}};
    j["recon"] = {{"feature_dim", recon.feature_dim},
                  {"sdf_hidden", recon.sdf_hidden},
                  {"pe_frequencies", recon.pe_frequencies},
                  {"grid_resolution", recon.grid_resolution}};
    json s1;
    if (stage1.learning_rate) s1["learning_rate"] = *stage1.learning_rate;
    s1["epochs"] = stage1.epochs;
    j["stage1"] = s1;
    json s2;
    if (stage2.learning_rate) s2["learning_rate"] = *stage2.learning_rate;
    s2["steps"] = stage2.steps;
    s2["points_per_scene"] = stage2.points_per_scene;
    s2["scenes_per_batch"] = stage2.scenes_per_batch;
    s2["near_surface_fraction"] = stage2.near_surface_fraction;
    s2["mask_loss_weight"] = stage2.mask_loss_weight;
    s2["extractor_lr_scale"] = stage2.extractor_lr_scale;
    s2["final_lr_fraction"] = stage2.final_lr_fraction;
    j["stage2"] = s2;
    j["decode"] = {{"strategy", decode.strategy},       {"beam_width", decode.beam_width},
                   {"max_new", decode.max_new},         {"temperature", decode.temperature},
                   {"seed", decode.seed},               {"length_normalize", decode.length_normalize}};
    j["tta"] = {{"k", tta.k},
                {"steps", tta.steps},
                {"learning_rate", tta.learning_rate},
                {"temperature", tta.temperature},
                {"scope", tta::scope_name(tta.scope)},
                {"leave_one_out", tta.leave_one_out},
                {"cumulative", tta.cumulative},
                {"max_new", tta.max_new},
                {"beam_width", tta.beam_width}};
    json ev;
    ev["mode"] = eval.mode;
    ev["grade_substring"] = eval.grade_substring;
    if (eval.rescue_reference_increment) ev["rescue_reference_increment"] = *eval.rescue_reference_increment;
    j["eval"] = ev;
    return j.dump();
}

std::string RunConfig::fingerprint() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(to_json())));
    return std::string(buf);
}

// ---------------------------------------------------------------- reports

std::string format_signed_4dp(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%+.4f", v);
    return std::string(buf);
}

bool grade_answer(int instruction, const std::string& expected, const std::string& answer,
                  bool substring) {
    std::string e = text::normalize(expected);
    std::string a = text::normalize(answer);
    if (instruction == 1 && substring) return a.find(e) != std::string::npos;
    return a == e;
}

EvalReport assemble_report(const std::string& mode, const std::string& fingerprint,
                           std::vector<PerSample> samples) {
    EvalReport r;
    r.mode = mode;
    r.config_fingerprint = fingerprint;
    std::set<std::string> ids;
    std::map<int, std::pair<int, int>> counts;  // instruction -> (total, correct)
    for (const auto& s : samples) {
        ids.insert(s.scene_id);
        auto& c = counts[s.instruction];
        ++c.first;
        if (s.correct) ++c.second;
    }
    r.total_samples = static_cast<int>(ids.size());
    for (const auto& [ins, c] : counts) {
        InstructionStats st;
        st.instruction = ins;
        st.total = c.first;
        st.correct = c.second;
        st.accuracy = c.first > 0 ? static_cast<double>(c.second) / c.first : 0.0;
        r.per_instruction.push_back(st);
    }
    r.per_sample = std::move(samples);
    return r;
}

namespace {

json rescue_to_json(const RescueBlock& b) {
    json j;
    j["total"] = b.total;
    j["baseline_correct"] = b.baseline_correct;
    j["baseline_failures"] = b.baseline_failures;
    j["rescued"] = b.rescued;
    j["increment"] = b.increment;
    j["increment_formatted"] = b.increment_formatted;
    if (b.reference_increment) j["reference_increment"] = *b.reference_increment;
    if (!b.note.empty()) j["note"] = b.note;
    return j;
}

RescueBlock rescue_from_json(const json& j) {
    RescueBlock b;
    b.total = j.at("total").get<int>();
    b.baseline_correct = j.at("baseline_correct").get<int>();
    b.baseline_failures = j.at("baseline_failures").get<int>();
    b.rescued = j.at("rescued").get<int>();
    b.increment = j.at("increment").get<double>();
    b.increment_formatted = get_or<std::string>(j, "increment_formatted", "");
    if (j.contains("reference_increment")) b.reference_increment = j.at("reference_increment").get<double>();
    b.note = get_or<std::string>(j, "note", "");
    return b;
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
    json j;
    j["mode"] = r.mode;
    j["config_fingerprint"] = r.config_fingerprint;
    j["total_samples"] = r.total_samples;
    json pi = json::array();
    for (const auto& s : r.per_instruction)
        pi.push_back({{"instruction", s.instruction},
                      {"total", s.total},
                      {"correct", s.correct},
                      {"accuracy", s.accuracy}});
    j["per_instruction"] = pi;
    json ps = json::array();
    for (const auto& s : r.per_sample)
        ps.push_back({{"scene_id", s.scene_id},
                      {"instruction", s.instruction},
                      {"expected", s.expected},
                      {"answer", s.answer},
                      {"correct", s.correct}});
    j["per_sample"] = ps;
    if (r.rescue) j["rescue"] = rescue_to_json(*r.rescue);
    return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& textual) {
    json j;
    try {
        j = json::parse(textual);
    } catch (const json::exception& e) {
        throw FormatError(std::string("report parse error: ") + e.what());
    }
    EvalReport r;
    r.mode = get_or<std::string>(j, "mode", "");
    r.config_fingerprint = get_or<std::string>(j, "config_fingerprint", "");
    r.total_samples = get_or<int>(j, "total_samples", 0);
    for (const auto& s : j.value("per_instruction", json::array())) {
        InstructionStats st;
        st.instruction = s.at("instruction").get<int>();
        st.total = s.at("total").get<int>();
        st.correct = s.at("correct").get<int>();
        st.accuracy = s.at("accuracy").get<double>();
        r.per_instruction.push_back(st);
    }
    for (const auto& s : j.value("per_sample", json::array())) {
        PerSample ps;
        ps.scene_id = s.at("scene_id").get<std::string>();
        ps.instruction = s.at("instruction").get<int>();
        ps.expected = s.at("expected").get<std::string>();
        ps.answer = s.at("answer").get<std::string>();
        ps.correct = s.at("correct").get<bool>();
        r.per_sample.push_back(ps);
    }
    if (j.contains("rescue")) r.rescue = rescue_from_json(j.at("rescue"));
    return r;
}

std::string report_to_csv(const EvalReport& r) {
    std::ostringstream os;
    os << "instruction,total,correct,accuracy\n";
    for (const auto& s : r.per_instruction)
        os << s.instruction << "," << s.total << "," << s.correct << "," << shortest(s.accuracy) << "\n";
    if (r.rescue) {
        const auto& b = *r.rescue;
        os << "rescue,total,baseline_correct,baseline_failures,rescued,increment,increment_formatted,"
              "reference_increment\n";
        os << "rescue," << b.total << "," << b.baseline_correct << "," << b.baseline_failures << ","
           << b.rescued << "," << shortest(b.increment) << "," << b.increment_formatted << ",";
        if (b.reference_increment) os << shortest(*b.reference_increment);
        os << "\n";
    }
    return os.str();
}

EvalReport report_from_csv(const std::string& textual) {
    EvalReport r;
    std::istringstream is(textual);
    std::string line;
    bool rescue_next = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (cells.empty()) continue;
        if (cells[0] == "instruction") continue;
        if (cells[0] == "rescue" && cells.size() > 1 && cells[1] == "total") {
            rescue_next = true;
            continue;
        }
        if (cells[0] == "rescue" && rescue_next) {
            RescueBlock b;
            b.total = std::stoi(cells.at(1));
            b.baseline_correct = std::stoi(cells.at(2));
            b.baseline_failures = std::stoi(cells.at(3));
            b.rescued = std::stoi(cells.at(4));
            b.increment = std::stod(cells.at(5));
            b.increment_formatted = cells.at(6);
            if (cells.size() > 7 && !cells[7].empty()) b.reference_increment = std::stod(cells.at(7));
            r.rescue = b;
            continue;
        }
        InstructionStats st;
        st.instruction = std::stoi(cells.at(0));
        st.total = std::stoi(cells.at(1));
        st.correct = std::stoi(cells.at(2));
        st.accuracy = std::stod(cells.at(3));
        r.per_instruction.push_back(st);
    }
    return r;
}

void emit_report(const EvalReport& r, const std::string& format, const std::string& path) {
    if (format == "json")
        write_text_file(path, report_to_json(r));
    else if (format == "csv")
        write_text_file(path, report_to_csv(r));
    else
        throw ConfigError("unknown report format: " + format);
}

// ---------------------------------------------------------------- rescue

RescueBlock rescue_from_counts(int total, int baseline_correct, int rescued,
                               std::optional<double> reference_increment) {
    if (total < 0 || baseline_correct < 0 || rescued < 0 || baseline_correct > total)
        throw DomainError("inconsistent rescue counts");
    RescueBlock b;
    b.total = total;
    b.baseline_correct = baseline_correct;
    b.baseline_failures = total - baseline_correct;
    if (rescued > b.baseline_failures) throw DomainError("rescued exceeds baseline failures");
    b.rescued = rescued;
    b.increment = total > 0 ? static_cast<double>(rescued) / total : 0.0;
    b.increment_formatted = format_signed_4dp(b.increment);
    b.reference_increment = reference_increment;
    if (reference_increment && std::fabs(*reference_increment - b.increment) > 5e-5) {
        b.note = "computed increment " + format_signed_4dp(b.increment) + " (" +
                 std::to_string(b.rescued) + "/" + std::to_string(b.total) +
                 ") differs from the reference value " + format_signed_4dp(*reference_increment);
    }
    return b;
}

RescueBlock rescue_analysis(const std::vector<PerSample>& baseline,
                            const std::vector<PerSample>& recon_pipeline,
                            std::optional<double> reference_increment) {
    std::map<std::string, bool> base, rec;
    for (const auto& s : baseline)
        if (s.instruction == 1) base[s.scene_id] = s.correct;
    for (const auto& s : recon_pipeline)
        if (s.instruction == 1) rec[s.scene_id] = s.correct;
    std::vector<std::string> missing;
    for (const auto& [id, ok] : base)
        if (!rec.count(id)) missing.push_back("-" + id);
    for (const auto& [id, ok] : rec)
        if (!base.count(id)) missing.push_back("+" + id);
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw DomainError("rescue_analysis sample ids differ: " + list);
    }
    int total = static_cast<int>(base.size());
    int correct = 0, rescued = 0;
    for (const auto& [id, ok] : base) {
        if (ok)
            ++correct;
        else if (rec.at(id))
            ++rescued;
    }
    return rescue_from_counts(total, correct, rescued, reference_increment);
}

// ---------------------------------------------------------------- training

namespace {

struct SampleRef {
    int record = 0;
    int qa = 0;
};

std::string ckpt_path(const RunConfig& cfg, const std::string& name) {
    return (fs::path(cfg.checkpoint_dir) / name).string();
}

synth::DatasetManifest load_split(const RunConfig& cfg, const std::string& split) {
    if (cfg.dataset_root.empty()) throw ConfigError("dataset_root not set");
    fs::path dir = fs::path(cfg.dataset_root) / split;
    if (!fs::exists(dir / "manifest.jsonl"))
        throw ConfigError("missing dataset split: " + dir.string());
    return synth::read_manifest(dir.string());
}

img::Image load_record_image(const RunConfig& cfg, const std::string& split,
                             const synth::SceneRecord& rec, bool free_view = false) {
    fs::path p = fs::path(cfg.dataset_root) / split / (free_view ? rec.image_free : rec.image);
    return img::read_png(p.string());
}

}  // namespace

num::Tensor build_caption_loss(Tape& tape, Binder& lm_bind, const lm::LmConfig& cfg, Tensor visual,
                               const text::TokenSeq& ids, int first_target, int n_targets) {
    if (n_targets == 0) return tape.scalar_input(0.0);
    int n_vis = visual.tape ? visual.rows() : 0;
    if (first_target < 1 || first_target + n_targets > static_cast<int>(ids.size()) + 1)
        throw DomainError("target span outside the token sequence");
    Tensor hidden = lm::build_hidden(tape, lm_bind, cfg, visual, ids);
    Tensor logits = lm::build_logits(tape, lm_bind, cfg, hidden);
    Tensor logp = tape.log_softmax(logits);
    std::vector<int> rows(static_cast<size_t>(n_targets)), cols(static_cast<size_t>(n_targets));
    for (int j = 0; j < n_targets; ++j) {
        rows[static_cast<size_t>(j)] = n_vis + first_target - 1 + j;
        cols[static_cast<size_t>(j)] = ids[static_cast<size_t>(first_target + j)];
    }
    return tape.neg(tape.mean_all(tape.gather_elems(logp, rows, cols)));
}

TrainTrace stage1_finetune(const RunConfig& cfg) {
    synth::DatasetManifest train = load_split(cfg, "train");
    if (train.records.empty()) throw DomainError("empty training dataset");

    // vocabulary over every instruction and answer in the split
    std::vector<std::string> corpus;
    for (const auto& rec : train.records)
        for (const auto& qa : rec.qa) {
            corpus.push_back(qa.instruction);
            corpus.push_back(qa.answer);
        }
    text::Vocab vocab = text::Vocab::build(corpus);

    // per-record pooled patches (images are not kept resident)
    int n_rec = static_cast<int>(train.records.size());
    std::vector<std::vector<double>> pooled(static_cast<size_t>(n_rec));
    parallel_for(
        n_rec,
        [&](int i) {
            pooled[static_cast<size_t>(i)] =
                img::patch_pool(load_record_image(cfg, "train", train.records[static_cast<size_t>(i)]));
        },
        cfg.threads);

    // contrastive pretraining of the towers on (occluded image, description) pairs
    clip::ClipTower tower = clip::ClipTower::init(cfg.clip, vocab.size(), cfg.seed);
    {
        std::vector<text::TokenSeq> captions(static_cast<size_t>(n_rec));
        for (int i = 0; i < n_rec; ++i)
            captions[static_cast<size_t>(i)] =
                vocab.tokenize(train.records[static_cast<size_t>(i)].qa[4].answer);
        Rng rng = Rng(cfg.seed).fork(0xC0FF);
        int bs = std::max(2, std::min<int>(cfg.clip_train.batch_size, n_rec));
        for (int step = 0; step < cfg.clip_train.steps; ++step) {
            std::vector<int> idx(static_cast<size_t>(n_rec));
            for (int i = 0; i < n_rec; ++i) idx[static_cast<size_t>(i)] = i;
            for (int i = 0; i < bs; ++i) {
                int j = i + rng.uniform_int(n_rec - i);
                std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
            }
            std::vector<std::vector<double>> bp;
            std::vector<text::TokenSeq> bt;
            for (int i = 0; i < bs; ++i) {
                bp.push_back(pooled[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
                bt.push_back(captions[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
            }
            Tape tape;
            Binder bind(tape, tower.params);
            Tensor loss = clip::build_contrastive_loss(tape, bind, tower.cfg, bp, bt);
            tape.backward_scalar(loss);
            GradMap grads;
            bind.accumulate_grads(grads);
            sgd_step(tower.params, grads, cfg.clip_train.learning_rate, 0.0);
        }
    }

    // frozen visual embeddings for the supervised phase (single-encoder path)
    std::vector<clip::Embedding> xv1(static_cast<size_t>(n_rec));
    parallel_for(
        n_rec, [&](int i) { xv1[static_cast<size_t>(i)] = tower.encode_pooled(pooled[static_cast<size_t>(i)]); },
        cfg.threads);

    lm::LmConfig lmc = cfg.lm;
    lmc.vocab = vocab.size();
    lm::LmModel model = lm::LmModel::init(lmc, cfg.seed);
    fusion::FusionMap fmap = fusion::FusionMap::init(cfg.fusion, cfg.seed);

    std::vector<SampleRef> samples;
    for (int r = 0; r < n_rec; ++r)
        for (int q = 0; q < synth::kQaPairs; ++q) samples.push_back({r, q});

    double lr = cfg.stage1.learning_rate.value_or(cfg.learning_rate);
    TrainTrace trace;
    Rng shuffle_rng = Rng(cfg.seed).fork(0x57A6E1);
    for (int epoch = 0; epoch < cfg.stage1.epochs; ++epoch) {
        std::vector<int> order(samples.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(static_cast<int>(i)))]);

        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
            size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(cfg.batch_size));
            int bsz = static_cast<int>(b1 - b0);
            std::vector<GradMap> grads(static_cast<size_t>(bsz));
            std::vector<double> losses(static_cast<size_t>(bsz), 0.0);
            parallel_for(
                bsz,
                [&](int bi) {
                    const SampleRef& ref = samples[static_cast<size_t>(order[b0 + static_cast<size_t>(bi)])];
                    const auto& rec = train.records[static_cast<size_t>(ref.record)];
                    const auto& qa = rec.qa[static_cast<size_t>(ref.qa)];
                    text::TokenSeq instr = vocab.tokenize(qa.instruction);
                    text::TokenSeq ans = vocab.tokenize(qa.answer);
                    text::TokenSeq ids;
                    ids.push_back(text::kBos);
                    ids.insert(ids.end(), instr.begin(), instr.end());
                    int first_target = static_cast<int>(ids.size());
                    ids.insert(ids.end(), ans.begin(), ans.end());
                    ids.push_back(text::kEos);
                    int n_targets = static_cast<int>(ans.size()) + 1;

                    Tape tape;
                    Binder lm_bind(tape, model.params);
                    Binder fu_bind(tape, fmap.params);
                    Tensor xv = tape.input({1, cfg.fusion.embed_dim}, xv1[static_cast<size_t>(ref.record)].v);
                    Tensor visual = fusion::build_tokens(tape, fu_bind, cfg.fusion, xv);
                    Tensor loss = build_caption_loss(tape, lm_bind, lmc, visual, ids, first_target, n_targets);
                    losses[static_cast<size_t>(bi)] = loss.scalar();
                    tape.backward_scalar(loss);
                    lm_bind.accumulate_grads(grads[static_cast<size_t>(bi)]);
                    fu_bind.accumulate_grads(grads[static_cast<size_t>(bi)]);
                },
                cfg.threads);

            GradMap total;
            for (const auto& g : grads)
                for (const auto& [name, v] : g) {
                    auto& slot = total[name];
                    if (slot.empty()) slot.assign(v.size(), 0.0);
                    for (size_t i = 0; i < v.size(); ++i) slot[i] += v[i];
                }
            scale_grads(total, 1.0 / bsz);
            GradMap lm_grads, fu_grads;
            for (auto& [name, v] : total)
                (name.rfind("fusion.", 0) == 0 ? fu_grads : lm_grads)[name] = std::move(v);
            sgd_step(model.params, lm_grads, lr, cfg.weight_decay);
            sgd_step(fmap.params, fu_grads, lr, cfg.weight_decay);

            double mean_loss = 0.0;
            for (double l : losses) mean_loss += l;
            trace.loss.push_back(mean_loss / bsz);
        }
    }

    fs::create_directories(cfg.checkpoint_dir);
    write_text_file(ckpt_path(cfg, "vocab.json"), vocab.to_json());
    save_checkpoint(tower.params, ckpt_path(cfg, "clip.json"));
    ParamMap vlm = model.params;
    for (const auto& [name, p] : fmap.params) vlm[name] = p;
    save_checkpoint(vlm, ckpt_path(cfg, "vlm.json"));
    json meta;
    meta["fingerprint"] = cfg.fingerprint();
    meta["config"] = json::parse(cfg.to_json());
    meta["vocab_size"] = vocab.size();
    write_text_file(ckpt_path(cfg, "meta.json"), meta.dump(2) + "\n");
    {
        json t;
        t["loss"] = trace.loss;
        write_text_file(ckpt_path(cfg, "stage1_trace.json"), t.dump() + "\n");
    }
    return trace;
}

TrainTrace stage2_train_sdf(const RunConfig& cfg) {
    synth::DatasetManifest train = load_split(cfg, "train");
    if (train.records.empty()) throw DomainError("empty training dataset");
    int n_rec = static_cast<int>(train.records.size());

    // feeds and ground-truth occluder masks, images not kept resident
    std::vector<recon::ImageFeed> feeds(static_cast<size_t>(n_rec));
    std::vector<std::vector<double>> true_masks(static_cast<size_t>(n_rec));
    parallel_for(
        n_rec,
        [&](int i) {
            const auto& rec = train.records[static_cast<size_t>(i)];
            feeds[static_cast<size_t>(i)] = recon::make_feed(load_record_image(cfg, "train", rec));
            true_masks[static_cast<size_t>(i)] = synth::occluder_patch_mask(rec, rec.view_id);
        },
        cfg.threads);

    recon::ReconModel model = recon::ReconModel::init(cfg.recon, cfg.seed);
    double lr = cfg.stage2.learning_rate.value_or(cfg.learning_rate);
    int batch = std::min(cfg.stage2.scenes_per_batch, n_rec);

    TrainTrace trace;
    trace.loss.reserve(static_cast<size_t>(cfg.stage2.steps));
    for (int step = 0; step < cfg.stage2.steps; ++step) {
        std::vector<GradMap> grads(static_cast<size_t>(batch));
        std::vector<double> losses(static_cast<size_t>(batch), 0.0);
        Rng step_rng = Rng(cfg.seed).fork(0x5DF0000 + static_cast<uint64_t>(step));
        std::vector<int> recs(static_cast<size_t>(batch));
        std::vector<uint64_t> seeds(static_cast<size_t>(batch));
        for (int b = 0; b < batch; ++b) {
            recs[static_cast<size_t>(b)] = step_rng.uniform_int(n_rec);
            seeds[static_cast<size_t>(b)] = step_rng.u64();
        }
        parallel_for(
            batch,
            [&](int b) {
                int ri = recs[static_cast<size_t>(b)];
                const auto& rec = train.records[static_cast<size_t>(ri)];
                Rng rng(seeds[static_cast<size_t>(b)]);
                int n_pts = cfg.stage2.points_per_scene;
                std::vector<recon::Vec3> pts;
                std::vector<double> targets;
                pts.reserve(static_cast<size_t>(n_pts));
                targets.reserve(static_cast<size_t>(n_pts));
                int n_near = static_cast<int>(n_pts * cfg.stage2.near_surface_fraction);
                for (int p = 0; p < n_pts; ++p) {
                    recon::Vec3 q{};
                    double sd = 0.0;
                    int tries = p < n_near ? 32 : 1;
                    for (int t = 0; t < tries; ++t) {
                        q = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
                        sd = synth::analytic_sdf_viewed(rec.object, rec.view_azimuth, q);
                        if (std::fabs(sd) < 0.12) break;
                    }
                    pts.push_back(q);
                    targets.push_back(sd);
                }

                Tape tape;
                Binder bind(tape, model.params);
                Tensor combined = recon::build_combined(tape, bind, cfg.recon, feeds[static_cast<size_t>(ri)],
                                                        &true_masks[static_cast<size_t>(ri)]);
                Tensor pred = recon::build_sdf(tape, bind, cfg.recon, combined, pts);
                Tensor target = tape.input({n_pts, 1}, targets);
                Tensor sdf_loss = tape.mean_all(tape.abs(tape.sub(pred, target)));

                Tensor mask_pred = recon::build_patch_mask(tape, bind, feeds[static_cast<size_t>(ri)].pooled);
                Tensor mask_true = tape.input({img::kPatchGrid * img::kPatchGrid, 1},
                                              true_masks[static_cast<size_t>(ri)]);
                Tensor mdiff = tape.sub(mask_pred, mask_true);
                Tensor mask_loss = tape.mean_all(tape.mul(mdiff, mdiff));

                Tensor loss = tape.add(sdf_loss, tape.scale(mask_loss, cfg.stage2.mask_loss_weight));
                losses[static_cast<size_t>(b)] = loss.scalar();
                tape.backward_scalar(loss);
                bind.accumulate_grads(grads[static_cast<size_t>(b)]);
            },
            cfg.threads);

        GradMap total;
        for (const auto& g : grads)
            for (const auto& [name, v] : g) {
                auto& slot = total[name];
                if (slot.empty()) slot.assign(v.size(), 0.0);
                for (size_t i = 0; i < v.size(); ++i) slot[i] += v[i];
            }
        scale_grads(total, 1.0 / batch);
        GradMap decoder, extract;
        for (auto& [name, v] : total)
            (name.rfind("recon.sdf.", 0) == 0 ? decoder : extract)[name] = std::move(v);
        double frac = cfg.stage2.steps > 1 ? static_cast<double>(step) / (cfg.stage2.steps - 1) : 0.0;
        double lr_t = lr * (1.0 - (1.0 - cfg.stage2.final_lr_fraction) * frac);
        sgd_step(model.params, decoder, lr_t, cfg.weight_decay);
        sgd_step(model.params, extract, lr_t * cfg.stage2.extractor_lr_scale, cfg.weight_decay);

        double mean_loss = 0.0;
        for (double l : losses) mean_loss += l;
        trace.loss.push_back(mean_loss / batch);
    }

    fs::create_directories(cfg.checkpoint_dir);
    save_checkpoint(model.params, ckpt_path(cfg, "recon.json"));
    {
        json t;
        t["loss"] = trace.loss;
        write_text_file(ckpt_path(cfg, "stage2_trace.json"), t.dump() + "\n");
    }
    return trace;
}

Checkpoints load_checkpoints(const RunConfig& cfg, bool need_recon) {
    for (const char* f : {"vocab.json", "clip.json", "vlm.json"})
        if (!fs::exists(fs::path(cfg.checkpoint_dir) / f))
            throw ConfigError("missing checkpoint artifact: " + (fs::path(cfg.checkpoint_dir) / f).string());
    if (need_recon && !fs::exists(fs::path(cfg.checkpoint_dir) / "recon.json"))
        throw ConfigError("missing checkpoint artifact: " +
                          (fs::path(cfg.checkpoint_dir) / "recon.json").string());

    text::Vocab vocab = text::Vocab::from_json(read_text_file(ckpt_path(cfg, "vocab.json")));
    clip::ClipTower tower;
    tower.cfg = cfg.clip;
    tower.vocab_size = vocab.size();
    tower.params = load_checkpoint(ckpt_path(cfg, "clip.json"));
    ParamMap vlm = load_checkpoint(ckpt_path(cfg, "vlm.json"));
    lm::LmModel model;
    model.cfg = cfg.lm;
    model.cfg.vocab = vocab.size();
    model.cfg.length_normalize_beam = cfg.decode.length_normalize;
    fusion::FusionMap fmap;
    fmap.cfg = cfg.fusion;
    for (auto& [name, p] : vlm)
        (name.rfind("fusion.", 0) == 0 ? fmap.params : model.params)[name] = std::move(p);

    Checkpoints out{std::move(vocab), std::move(tower), std::move(model), std::move(fmap), std::nullopt};
    if (need_recon) {
        recon::ReconModel rm;
        rm.cfg = cfg.recon;
        rm.params = load_checkpoint(ckpt_path(cfg, "recon.json"));
        out.recon_model = std::move(rm);
    }
    return out;
}

namespace {

text::TokenSeq decode_answer(const RunConfig& cfg, const lm::LmModel& model, const lm::LmInput& prompt) {
    if (cfg.decode.strategy == "beam")
        return lm::beam_search(model, prompt, cfg.decode.beam_width, cfg.decode.max_new);
    if (cfg.decode.strategy == "greedy") return lm::greedy_decode(model, prompt, cfg.decode.max_new);
    if (cfg.decode.strategy == "sample")
        return lm::sample_decode(model, prompt, cfg.decode.max_new, cfg.decode.temperature, cfg.decode.seed)
            .tokens;
    throw ConfigError("unknown decode.strategy: " + cfg.decode.strategy);
}

}  // namespace

EvalReport evaluate(const RunConfig& cfg, const std::string& mode,
                    const std::optional<std::string>& baseline_report_path) {
    auto t0 = std::chrono::steady_clock::now();
    if (mode != "baseline" && mode != "fused" && mode != "recon-describe")
        throw ConfigError("unknown eval mode: " + mode);
    bool need_recon = mode != "baseline";
    Checkpoints ck = load_checkpoints(cfg, need_recon);
    synth::DatasetManifest test = load_split(cfg, "test");
    int n_rec = static_cast<int>(test.records.size());

    std::vector<std::vector<PerSample>> rows(static_cast<size_t>(n_rec));
    parallel_for(
        n_rec,
        [&](int i) {
            const auto& rec = test.records[static_cast<size_t>(i)];
            img::Image image = load_record_image(cfg, "test", rec);

            clip::Embedding xv;
            if (mode == "baseline") {
                xv = ck.tower.encode_image(image);
            } else if (mode == "fused") {
                clip::Embedding xv1 = ck.tower.encode_image(image);
                recon::OccludedEmbedding oe =
                    recon::embed_occluded(*ck.recon_model, ck.tower, image, cfg.recon.grid_resolution);
                xv = fusion::blend(xv1, oe.embedding, cfg.fusion.alpha);
            } else {  // recon-describe: the projected reconstruction is the sole image
                recon::FeatureBundle fb = ck.recon_model->extract_features(image);
                recon::SdfGrid grid = ck.recon_model->sample_grid(fb.combined, cfg.recon.grid_resolution);
                img::Image render = recon::project(recon::reconstruct_mesh(grid));
                xv = ck.tower.encode_image(render);
            }
            std::vector<double> vt = fusion::map_to_tokens(ck.fmap, xv);

            for (int q = 0; q < 4; ++q) {
                const auto& qa = rec.qa[static_cast<size_t>(q)];
                text::TokenSeq ids;
                ids.push_back(text::kBos);
                text::TokenSeq instr = ck.vocab.tokenize(qa.instruction);
                ids.insert(ids.end(), instr.begin(), instr.end());
                lm::LmInput prompt = fusion::fuse_inputs(vt, cfg.fusion, ids);
                text::TokenSeq ans = decode_answer(cfg, ck.lm, prompt);
                PerSample ps;
                ps.scene_id = rec.scene_id;
                ps.instruction = q + 1;
                ps.expected = qa.answer;
                ps.answer = ck.vocab.detokenize(ans);
                ps.correct = grade_answer(q + 1, ps.expected, ps.answer, cfg.eval.grade_substring);
                rows[static_cast<size_t>(i)].push_back(std::move(ps));
            }
        },
        cfg.threads);

    std::vector<PerSample> samples;
    for (auto& r : rows)
        for (auto& s : r) samples.push_back(std::move(s));
    EvalReport report = assemble_report(mode, cfg.fingerprint(), std::move(samples));

    if (baseline_report_path) {
        EvalReport base = report_from_json(read_text_file(*baseline_report_path));
        report.rescue =
            rescue_analysis(base.per_sample, report.per_sample, cfg.eval.rescue_reference_increment);
    }
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

AdaptSummary adapt_test_set(const RunConfig& cfg, const std::string& checkpoint_dir) {
    RunConfig local = cfg;
    if (!checkpoint_dir.empty()) local.checkpoint_dir = checkpoint_dir;
    Checkpoints ck = load_checkpoints(local, true);
    synth::DatasetManifest test = load_split(local, "test");
    int n_rec = static_cast<int>(test.records.size());

    struct RecordOut {
        std::vector<tta::StepReport> trace;
        double before = 0.0;
        double after = 0.0;
        std::string scene_id;
    };
    std::vector<RecordOut> outs(static_cast<size_t>(n_rec));

    auto run_one = [&](int i, tta::AdaptState* shared_state) {
        const auto& rec = test.records[static_cast<size_t>(i)];
        img::Image image = load_record_image(local, "test", rec);
        clip::Embedding xv1 = ck.tower.encode_image(image);
        recon::OccludedEmbedding oe =
            recon::embed_occluded(*ck.recon_model, ck.tower, image, local.recon.grid_resolution);

        tta::AdaptState state{ck.lm, ck.fmap, xv1, oe.embedding, local.fusion.alpha};
        tta::AdaptState* use = shared_state ? shared_state : &state;
        if (shared_state) {
            shared_state->xv1 = xv1;
            shared_state->xv2 = oe.embedding;
        }

        text::TokenSeq instruction = ck.vocab.tokenize(rec.qa[4].instruction);
        text::TokenSeq before =
            lm::beam_search(use->lm, tta::make_prompt(*use, instruction), local.tta.beam_width,
                            local.tta.max_new);
        RecordOut& out = outs[static_cast<size_t>(i)];
        out.scene_id = rec.scene_id;
        out.before = tta::clip_score_or_zero(ck.tower, before, image);

        uint64_t sample_seed = Rng(local.seed).fork(0xAD000 + static_cast<uint64_t>(i)).u64();
        if (shared_state) {
            // cumulative mode: adapt in place, then answer
            Rng seeder = Rng(sample_seed).fork(0x77A);
            for (int s = 0; s < local.tta.steps; ++s)
                out.trace.push_back(
                    tta::adapt_step(*shared_state, image, instruction, ck.tower, local.tta, seeder.u64()));
            text::TokenSeq ans = lm::beam_search(shared_state->lm, tta::make_prompt(*shared_state, instruction),
                                                 local.tta.beam_width, local.tta.max_new);
            out.after = tta::clip_score_or_zero(ck.tower, ans, image);
        } else {
            tta::AdaptResult res =
                tta::test_time_adapt(state, image, instruction, ck.tower, local.tta, sample_seed);
            out.trace = std::move(res.trace);
            out.after = tta::clip_score_or_zero(ck.tower, res.answer, image);
        }
    };

    if (local.tta.cumulative) {
        tta::AdaptState shared{ck.lm, ck.fmap, {}, {}, local.fusion.alpha};
        for (int i = 0; i < n_rec; ++i) run_one(i, &shared);
    } else {
        parallel_for(n_rec, [&](int i) { run_one(i, nullptr); }, local.threads);
    }

    // trace: one JSON line per (sample, step)
    std::ostringstream tr;
    AdaptSummary summary;
    summary.samples = n_rec;
    for (const auto& o : outs) {
        for (size_t s = 0; s < o.trace.size(); ++s) {
            json line;
            line["sample_id"] = o.scene_id;
            line["step"] = s;
            line["mean_clip_s"] = o.trace[s].mean_clip_s;
            line["reward_variance"] = o.trace[s].reward_variance;
            line["cum_logprob_of_best"] = o.trace[s].best_cum_logprob;
            tr << line.dump() << "\n";
        }
        summary.mean_clip_s_before += o.before;
        summary.mean_clip_s_after += o.after;
        if (o.after > o.before) ++summary.improved;
    }
    if (n_rec > 0) {
        summary.mean_clip_s_before /= n_rec;
        summary.mean_clip_s_after /= n_rec;
    }
    write_text_file((fs::path(local.checkpoint_dir) / "tta_trace.jsonl").string(), tr.str());
    json sj;
    sj["samples"] = summary.samples;
    sj["mean_clip_s_before"] = summary.mean_clip_s_before;
    sj["mean_clip_s_after"] = summary.mean_clip_s_after;
    sj["improved"] = summary.improved;
    sj["fingerprint"] = local.fingerprint();
    write_text_file((fs::path(local.checkpoint_dir) / "tta_summary.json").string(), sj.dump(2) + "\n");
    return summary;
}

void run_pipeline(const RunConfig& cfg) {
    std::vector<int> stages = cfg.stages;
    std::sort(stages.begin(), stages.end());
    if (stages.empty()) throw ConfigError("no stages selected");
    for (int s : stages)
        if (s < 1 || s > 3) throw ConfigError("unknown stage " + std::to_string(s));

    std::set<int> selected(stages.begin(), stages.end());
    auto have = [&](const std::string& f) {
        return fs::exists(fs::path(cfg.checkpoint_dir) / f);
    };
    if (selected.count(3)) {
        if (!selected.count(1) && !have("vlm.json"))
            throw ConfigError("stage 3 requires the stage-1 checkpoint vlm.json");
        if (!selected.count(2) && !have("recon.json"))
            throw ConfigError("stage 3 requires the stage-2 checkpoint recon.json");
    }

    for (int s : stages) {
        if (s == 1) {
            stage1_finetune(cfg);
        } else if (s == 2) {
            stage2_train_sdf(cfg);
        } else {
            adapt_test_set(cfg, cfg.checkpoint_dir);
            EvalReport rep = evaluate(cfg, cfg.eval.mode);
            emit_report(rep, "json", (fs::path(cfg.checkpoint_dir) / "eval_report.json").string());
            emit_report(rep, "csv", (fs::path(cfg.checkpoint_dir) / "eval_report.csv").string());
        }
    }
}

void generate_data(uint64_t seed, int train_scenes, int test_scenes, int views, const std::string& out) {
    if (train_scenes < 1 || test_scenes < 1 || views < 1)
        throw DomainError("scene and view counts must be positive");
    synth::GenSpec train;
    train.scenes = train_scenes;
    train.views = views;
    synth::GenSpec test = train;
    test.scenes = test_scenes;
    synth::generate_dataset(seed, train, test, out);
}

}  // namespace occ::harness
