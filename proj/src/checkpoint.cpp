#include "pretext/checkpoint.hpp"

#include <fstream>

#include "pretext/errors.hpp"

namespace pretext {

namespace {

nlohmann::json matrix_to_json(const Matrix& m) {
    std::vector<double> data;
    data.reserve(static_cast<size_t>(m.size()));
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
    return nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
    const Index rows = j.at("rows").get<Index>();
    const Index cols = j.at("cols").get<Index>();
    const auto& data = j.at("data");
    if (rows < 0 || cols < 0 || static_cast<Index>(data.size()) != rows * cols)
        throw ParseError("checkpoint matrix: size mismatch");
    Matrix m(rows, cols);
    size_t k = 0;
    for (Index i = 0; i < rows; ++i)
        for (Index jx = 0; jx < cols; ++jx) m(i, jx) = data[k++].get<double>();
    return m;
}

}  // namespace

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
    nlohmann::json params = nlohmann::json::object();
    for (const auto& [name, slot] : ckpt.params.slots()) {
        params[name] = nlohmann::json{{"value", matrix_to_json(slot.value)},
                                      {"m", matrix_to_json(slot.m)},
                                      {"v", matrix_to_json(slot.v)}};
    }
    return nlohmann::json{{"version", ckpt.version},
                          {"model", ckpt.model},
                          {"beta", ckpt.beta},
                          {"gamma", ckpt.gamma},
                          {"tau", ckpt.tau},
                          {"num_classes", ckpt.num_classes},
                          {"vocab", nlohmann::json{{"tokens", ckpt.vocab.tokens()},
                                                   {"hash", ckpt.vocab.content_hash()}}},
                          {"params", params},
                          {"optimizer", nlohmann::json{{"step_count", ckpt.params.step_count()}}},
                          {"rng_state", ckpt.rng_state},
                          {"train_config", ckpt.train_config}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    Checkpoint ckpt;
    j.at("version").get_to(ckpt.version);
    if (ckpt.version != 1)
        throw ConfigError("unsupported checkpoint version " + std::to_string(ckpt.version));
    j.at("model").get_to(ckpt.model);
    j.at("beta").get_to(ckpt.beta);
    j.at("gamma").get_to(ckpt.gamma);
    j.at("tau").get_to(ckpt.tau);
    j.at("num_classes").get_to(ckpt.num_classes);
    ckpt.vocab = Vocabulary::from_tokens(j.at("vocab").at("tokens").get<std::vector<std::string>>());
    const uint64_t expect = j.at("vocab").at("hash").get<uint64_t>();
    if (ckpt.vocab.content_hash() != expect)
        throw ValidationError("checkpoint vocabulary hash mismatch");
    for (const auto& [name, entry] : j.at("params").items()) {
        Matrix value = matrix_from_json(entry.at("value"));
        Matrix& created = ckpt.params.create(name, value.rows(), value.cols());
        created = value;
        auto& slot = ckpt.params.slots_mutable().at(name);
        slot.m = matrix_from_json(entry.at("m"));
        slot.v = matrix_from_json(entry.at("v"));
        if (slot.m.rows() != value.rows() || slot.m.cols() != value.cols() ||
            slot.v.rows() != value.rows() || slot.v.cols() != value.cols())
            throw ParseError("checkpoint optimizer state shape mismatch for " + name);
    }
    ckpt.params.set_step_count(j.at("optimizer").at("step_count").get<int64_t>());
    j.at("rng_state").get_to(ckpt.rng_state);
    if (j.contains("train_config")) ckpt.train_config = j.at("train_config");
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot write checkpoint: " + path);
    out << checkpoint_to_json(ckpt).dump() << '\n';
    if (!out) throw InputError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("checkpoint " + path + ": " + e.what());
    }
    return checkpoint_from_json(j);
}

}  // namespace pretext
