#include "pretext/eval.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "pretext/errors.hpp"
#include "pretext/nn.hpp"

namespace pretext {

std::vector<int> retrieve(const EmbeddingVector& query, const Matrix& gallery) {
    if (gallery.rows() < 1) throw ContractError("retrieve: empty gallery");
    if (gallery.cols() != query.size())
        throw ContractError("retrieve: dimension mismatch (query " + std::to_string(query.size()) +
                            ", gallery " + std::to_string(gallery.cols()) + ")");
    std::vector<double> sims(static_cast<size_t>(gallery.rows()));
    for (Index j = 0; j < gallery.rows(); ++j)
        sims[static_cast<size_t>(j)] = cosine_similarity(query, gallery.row(j).transpose());
    std::vector<int> order(sims.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return sims[static_cast<size_t>(a)] > sims[static_cast<size_t>(b)];
    });
    return order;
}

RetrievalRun make_retrieval_run(Matrix queries, Matrix gallery, std::vector<int> query_ids,
                                std::vector<int> gallery_ids) {
    if (queries.rows() != static_cast<Index>(query_ids.size()))
        throw ContractError("retrieval run: query label count mismatch");
    if (gallery.rows() != static_cast<Index>(gallery_ids.size()))
        throw ContractError("retrieval run: gallery label count mismatch");
    RetrievalRun run;
    run.queries = std::move(queries);
    run.gallery = std::move(gallery);
    run.query_ids = std::move(query_ids);
    run.gallery_ids = std::move(gallery_ids);
    run.ranked.reserve(run.query_ids.size());
    for (Index i = 0; i < run.queries.rows(); ++i)
        run.ranked.push_back(retrieve(run.queries.row(i).transpose(), run.gallery));
    return run;
}

double rank_k(const RetrievalRun& run, int k) {
    if (k < 1) throw ContractError("rank_k: k must be >= 1");
    if (run.ranked.size() != run.query_ids.size())
        throw ContractError("rank_k: run is missing ranked lists");
    const std::set<int> gallery_identities(run.gallery_ids.begin(), run.gallery_ids.end());
    size_t hits = 0;
    for (size_t q = 0; q < run.ranked.size(); ++q) {
        const int identity = run.query_ids[q];
        if (!gallery_identities.count(identity))
            throw EvalError("query " + std::to_string(q) + " (identity " +
                            std::to_string(identity) + ") has no gallery match");
        const auto& order = run.ranked[q];
        const size_t top = std::min(static_cast<size_t>(k), order.size());
        for (size_t r = 0; r < top; ++r) {
            if (run.gallery_ids[static_cast<size_t>(order[r])] == identity) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(run.ranked.size());
}

namespace {

std::string config_hash_of(const Checkpoint& ckpt) {
    nlohmann::json j = nlohmann::json{{"model", ckpt.model},
                                      {"beta", ckpt.beta},
                                      {"gamma", ckpt.gamma},
                                      {"tau", ckpt.tau},
                                      {"num_classes", ckpt.num_classes},
                                      {"vocab_hash", ckpt.vocab.content_hash()}};
    std::ostringstream hex;
    hex << std::hex << std::setfill('0') << std::setw(16) << fnv1a(j.dump());
    return hex.str();
}

}  // namespace

RankKReport evaluate(const Checkpoint& ckpt, const DatasetManifest& manifest) {
    std::vector<const PersonRecord*> queries, gallery;
    for (const auto& rec : manifest.records) {
        if (rec.split == "query")
            queries.push_back(&rec);
        else if (rec.split == "gallery")
            gallery.push_back(&rec);
    }
    if (queries.empty()) throw ValidationError("manifest has no records with split \"query\"");
    if (gallery.empty()) throw ValidationError("manifest has no records with split \"gallery\"");

    std::vector<int> query_ids, gallery_ids;
    std::vector<std::string> captions;
    for (const auto* rec : queries) {
        if (!rec->identity)
            throw ValidationError("query record '" + rec->image_id + "' lacks an identity");
        query_ids.push_back(*rec->identity);
        captions.push_back(rec->caption);
    }
    for (const auto* rec : gallery) {
        if (!rec->identity)
            throw ValidationError("gallery record '" + rec->image_id + "' lacks an identity");
        gallery_ids.push_back(*rec->identity);
    }

    const bool use_pgu = ckpt.gamma == 1;
    if (use_pgu && !ckpt.params.has("pgu.protos"))
        throw ContractError("checkpoint says gamma=1 but has no unification head");
    Matrix q = embed_texts(ckpt.params, ckpt.model, ckpt.vocab, captions, use_pgu);
    Matrix g = embed_images(ckpt.params, ckpt.model, gallery, use_pgu);

    RetrievalRun run = make_retrieval_run(std::move(q), std::move(g), std::move(query_ids),
                                          std::move(gallery_ids));
    RankKReport report;
    report.rank1 = rank_k(run, 1);
    report.rank5 = rank_k(run, 5);
    report.rank10 = rank_k(run, 10);
    report.n_queries = run.query_ids.size();
    report.config_hash = config_hash_of(ckpt);
    return report;
}

RankKReport cross_domain_evaluate(const Checkpoint& ckpt, const DatasetManifest& manifest_b) {
    return evaluate(ckpt, manifest_b);
}

std::string report_table(const RankKReport& report) {
    std::ostringstream out;
    out << "metric   value\n";
    out << "Rank-1   " << report.rank1 << "\n";
    out << "Rank-5   " << report.rank5 << "\n";
    out << "Rank-10  " << report.rank10 << "\n";
    out << "queries  " << report.n_queries << "\n";
    out << "config   " << report.config_hash << "\n";
    return out.str();
}

nlohmann::json report_to_json(const RankKReport& report) {
    return nlohmann::json{{"rank1", report.rank1},
                          {"rank5", report.rank5},
                          {"rank10", report.rank10},
                          {"n_queries", report.n_queries},
                          {"config_hash", report.config_hash}};
}

}  // namespace pretext
