// Command-line front end: corpus generation, training, synthesis and
// evaluation. Exit codes: 0 success, 2 validation error, 3 runtime/numeric
// error, 4 I/O error.

#include <atomic>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "mtwn/container.hpp"
#include "mtwn/corpus.hpp"
#include "mtwn/inference.hpp"
#include "mtwn/metrics.hpp"
#include "mtwn/training.hpp"
#include "mtwn/version.hpp"

namespace {

using nlohmann::json;

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw mtwn::IoError("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Deterministic run id: a run is re-creatable from its inputs, so the id is
// a digest of them rather than a timestamp.
std::string make_run_id(const std::string& command, const std::string& flags) {
    mtwn::Fnv1a h;
    h.update(command.data(), command.size());
    h.update(flags.data(), flags.size());
    char buf[32];
    std::snprintf(buf, sizeof(buf), "run-%016llx",
                  static_cast<unsigned long long>(h.digest()));
    return buf;
}

void write_run_manifest(const std::filesystem::path& path, const std::string& run_id,
                        const std::string& command, const json& flags, const json& files) {
    json j;
    j["run_id"] = run_id;
    j["version"] = mtwn::kVersionString;
    j["command"] = command;
    j["flags"] = flags;
    j["files"] = files;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw mtwn::IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

// ---- corpus ----

int cmd_corpus(const std::filesystem::path& spec_path, const std::filesystem::path& out_dir) {
    const mtwn::CorpusSpec spec = mtwn::corpus_spec_from_json(read_text_file(spec_path));
    std::filesystem::create_directories(out_dir);
    const std::uint64_t checksum = mtwn::write_corpus(spec, out_dir);

    json flags = {{"spec", spec_path.string()}, {"out", out_dir.string()}};
    const std::string run_id = make_run_id("corpus", flags.dump());
    json files = {{"manifest", (out_dir / "manifest.jsonl").string()},
                  {"corpus_spec", (out_dir / "corpus_spec.json").string()}};
    write_run_manifest(out_dir / "run_manifest.json", run_id, "corpus", flags, files);

    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(checksum));
    std::cout << "corpus checksum: " << buf << "\n";
    std::cout << "manifest: " << (out_dir / "manifest.jsonl").string() << "\n";
    return 0;
}

// ---- train ----

int cmd_train(const std::filesystem::path& manifest_path,
              const std::filesystem::path& config_path, const std::string& mode_name,
              const std::filesystem::path& out_dir, const std::string& resume) {
    const mtwn::ConditionMode mode = mtwn::condition_mode_from_name(mode_name);
    mtwn::TrainOptions options;
    options.config = mtwn::train_config_from_json(read_text_file(config_path));
    options.mode = mode;
    options.out_dir = out_dir;
    if (!resume.empty()) options.resume = resume;

    json flags = {{"corpus", manifest_path.string()},
                  {"config", config_path.string()},
                  {"mode", mode_name},
                  {"out", out_dir.string()},
                  {"resume", resume}};
    options.run_id = make_run_id("train", flags.dump());

    const auto entries = mtwn::manifest_read(manifest_path);
    std::vector<mtwn::Utterance> corpus;
    corpus.reserve(entries.size());
    for (const auto& entry : entries) corpus.push_back(mtwn::utterance_load(entry));
    {
        // n_symbols travels with the checkpoint for provenance.
        mtwn::Container c = mtwn::container_read(entries.front().feature_path);
        options.n_symbols = json::parse(c.meta_json).value("n_symbols", 8);
    }

    const mtwn::TrainResult result = mtwn::train(std::move(corpus), options);

    json files = {{"final_checkpoint", result.final_checkpoint.string()},
                  {"loss_log", result.loss_log.string()},
                  {"corpus_manifest", manifest_path.string()},
                  {"config", config_path.string()}};
    write_run_manifest(out_dir / "run_manifest.json", options.run_id, "train", flags, files);
    std::cout << "final checkpoint: " << result.final_checkpoint.string() << "\n";
    return 0;
}

// ---- synth ----

int cmd_synth(const std::filesystem::path& checkpoint_path,
              const std::filesystem::path& manifest_path, const std::string& utterance_list,
              const std::filesystem::path& out_dir, bool argmax, double temperature,
              std::uint64_t seed, int jobs, bool emit_bins) {
    const mtwn::LoadedCheckpoint loaded = mtwn::checkpoint_load(checkpoint_path);
    const mtwn::TrainedModel& model = loaded.model;

    auto entries = mtwn::manifest_read(manifest_path);
    if (utterance_list != "all") {
        std::vector<mtwn::ManifestEntry> picked;
        std::stringstream ss(utterance_list);
        std::string id;
        while (std::getline(ss, id, ',')) {
            bool found = false;
            for (const auto& entry : entries)
                if (entry.id == id) {
                    picked.push_back(entry);
                    found = true;
                }
            if (!found)
                throw mtwn::ArgumentError("synth: utterance id '" + id + "' not in manifest");
        }
        entries = std::move(picked);
    }
    if (entries.empty()) throw mtwn::ArgumentError("synth: no utterances selected");

    std::filesystem::create_directories(out_dir);
    if (jobs < 1) jobs = static_cast<int>(std::thread::hardware_concurrency());
    if (jobs < 1) jobs = 1;

    std::atomic<std::size_t> next{0};
    std::vector<std::string> errors(entries.size());
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= entries.size()) return;
            try {
                mtwn::Utterance utt = mtwn::utterance_load(entries[i]);
                mtwn::Tensor cond = model.condition_features(utt);
                if (static_cast<int>(cond.dim(0)) != model.conditioner.config().input_dim)
                    throw mtwn::ArgumentError(
                        "synth: checkpoint mode '" + mtwn::condition_mode_name(model.mode) +
                        "' expects " + std::to_string(model.conditioner.config().input_dim) +
                        " condition rows but the corpus provides " +
                        std::to_string(cond.dim(0)));
                mtwn::NoGradGuard ng;
                auto [frame_enc, sample_enc] =
                    model.conditioner.forward({cond, utt.frame_shift});
                (void)frame_enc;  // the secondary head is unused at synthesis
                mtwn::SamplerConfig sampler;
                sampler.mode = argmax ? mtwn::SamplerConfig::Mode::kArgmax
                                      : mtwn::SamplerConfig::Mode::kSample;
                sampler.temperature = temperature;
                mtwn::Fnv1a idh;
                idh.update(entries[i].id.data(), entries[i].id.size());
                sampler.seed = mtwn::mix_seed(seed, idh.digest());
                mtwn::GenerateResult res = mtwn::generate(model.net, sample_enc, sampler,
                                                          utt.waveform.sample_rate);
                mtwn::wav_write(out_dir / (entries[i].id + ".wav"), res.waveform);
                if (emit_bins) {
                    std::ofstream bins(out_dir / (entries[i].id + ".bins.txt"),
                                       std::ios::trunc);
                    for (auto b : res.bins) bins << static_cast<int>(b) << "\n";
                }
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    for (const auto& err : errors)
        if (!err.empty()) throw mtwn::ArgumentError(err);

    json flags = {{"checkpoint", checkpoint_path.string()},
                  {"corpus", manifest_path.string()},
                  {"utterances", utterance_list},
                  {"out", out_dir.string()},
                  {"argmax", argmax},
                  {"temperature", temperature},
                  {"seed", seed}};
    const std::string run_id = make_run_id("synth", flags.dump());
    json files = {{"checkpoint", checkpoint_path.string()},
                  {"corpus_manifest", manifest_path.string()}};
    write_run_manifest(out_dir / "run_manifest.json", run_id, "synth", flags, files);
    std::cout << "synthesized " << entries.size() << " utterance(s) to " << out_dir.string()
              << "\n";
    return 0;
}

// ---- eval ----

int cmd_eval(const std::vector<std::string>& generated_dirs,
             const std::filesystem::path& manifest_path, const std::filesystem::path& report,
             int jobs) {
    const auto entries = mtwn::manifest_read(manifest_path);
    if (jobs < 1) jobs = static_cast<int>(std::thread::hardware_concurrency());
    if (jobs < 1) jobs = 1;

    std::vector<mtwn::SystemEval> rows;
    for (const auto& dir : generated_dirs) {
        const std::filesystem::path gen(dir);
        if (!std::filesystem::exists(gen)) throw mtwn::IoError("eval: no such dir " + dir);
        bool any_wav = false;
        for (const auto& e : std::filesystem::directory_iterator(gen))
            if (e.path().extension() == ".wav") any_wav = true;
        if (!any_wav) {
            std::string expected;
            for (const auto& entry : entries) expected += " " + entry.id;
            throw mtwn::ArgumentError("eval: no WAVs in " + dir + "; expected ids:" + expected);
        }
        std::string name = gen.filename().string();
        if (name.empty()) name = gen.parent_path().filename().string();
        rows.push_back(mtwn::evaluate_system(name, entries, gen, jobs));
    }

    std::cout << mtwn::eval_report_table(rows);
    mtwn::eval_report_write(report, rows);

    json flags = {{"generated", generated_dirs},
                  {"corpus", manifest_path.string()},
                  {"out", report.string()}};
    const std::string run_id = make_run_id("eval", flags.dump());
    json files = {{"report", report.string()}, {"corpus_manifest", manifest_path.string()}};
    write_run_manifest(report.string() + ".run.json", run_id, "eval", flags, files);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-task WaveNet speech synthesis pipeline"};
    app.set_version_flag("--version", mtwn::kVersionString);
    app.require_subcommand(1);

    // corpus
    auto* corpus = app.add_subcommand("corpus", "Generate the synthetic corpus");
    std::string corpus_spec, corpus_out;
    corpus->add_option("--spec", corpus_spec, "Corpus spec JSON file")->required();
    corpus->add_option("--out", corpus_out, "Output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "Train a model on a corpus manifest");
    std::string train_corpus, train_config, train_mode, train_out, train_resume;
    train->add_option("--corpus", train_corpus, "Corpus manifest")->required();
    train->add_option("--config", train_config, "Training config JSON file")->required();
    train->add_option("--mode", train_mode, "linguistic | linguistic+f0 | mtl")->required();
    train->add_option("--out", train_out, "Output directory")->required();
    train->add_option("--resume", train_resume, "Checkpoint to resume from");

    // synth
    auto* synth = app.add_subcommand("synth", "Synthesize waveforms from a checkpoint");
    std::string synth_ckpt, synth_corpus, synth_utts = "all", synth_out;
    bool synth_argmax = false, synth_bins = false;
    double synth_temp = 1.0;
    std::uint64_t synth_seed = 0;
    int synth_jobs = 0;
    synth->add_option("--checkpoint", synth_ckpt, "Model checkpoint")->required();
    synth->add_option("--corpus", synth_corpus, "Corpus manifest (conditions)")->required();
    synth->add_option("--utterances", synth_utts, "Comma-separated ids or 'all'");
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_flag("--argmax", synth_argmax, "Deterministic argmax decoding");
    synth->add_option("--temperature", synth_temp, "Sampling temperature (> 0)");
    synth->add_option("--seed", synth_seed, "Sampling seed");
    synth->add_option("--jobs", synth_jobs, "Parallel utterances (default: cores)");
    synth->add_flag("--emit-bins", synth_bins, "Write per-step bin traces");

    // eval
    auto* eval = app.add_subcommand("eval", "Objective evaluation of generated audio");
    std::vector<std::string> eval_gen;
    std::string eval_corpus, eval_out;
    int eval_jobs = 0;
    eval->add_option("--generated", eval_gen, "Generated WAV directory (repeatable)")
        ->required();
    eval->add_option("--corpus", eval_corpus, "Corpus manifest (references)")->required();
    eval->add_option("--out", eval_out, "Report output path")->required();
    eval->add_option("--jobs", eval_jobs, "Parallel utterances (default: cores)");

    try {
        app.parse(argc, argv);
        if (corpus->parsed()) return cmd_corpus(corpus_spec, corpus_out);
        if (train->parsed())
            return cmd_train(train_corpus, train_config, train_mode, train_out, train_resume);
        if (synth->parsed())
            return cmd_synth(synth_ckpt, synth_corpus, synth_utts, synth_out, synth_argmax,
                             synth_temp, synth_seed, synth_jobs, synth_bins);
        if (eval->parsed()) return cmd_eval(eval_gen, eval_corpus, eval_out, eval_jobs);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const mtwn::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const mtwn::ArgumentError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const mtwn::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const mtwn::DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const mtwn::IndexError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
