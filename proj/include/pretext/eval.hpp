#pragma once
#include <json.hpp>

#include <string>
#include <vector>

#include "pretext/checkpoint.hpp"
#include "pretext/data.hpp"
#include "pretext/scorer.hpp"
#include "pretext/tensor.hpp"

namespace pretext {

// Full gallery ordering by descending cosine similarity; exact ties keep the
// lower gallery index first.
std::vector<int> retrieve(const EmbeddingVector& query, const Matrix& gallery);

struct RetrievalRun {
    Matrix queries;  // Nq×d text embeddings
    Matrix gallery;  // Ng×d image embeddings
    std::vector<int> query_ids;
    std::vector<int> gallery_ids;
    std::vector<std::vector<int>> ranked;  // per query
};

RetrievalRun make_retrieval_run(Matrix queries, Matrix gallery, std::vector<int> query_ids,
                                std::vector<int> gallery_ids);

// Fraction of queries with a same-identity gallery item in the top k.
double rank_k(const RetrievalRun& run, int k);

struct RankKReport {
    double rank1 = 0.0;
    double rank5 = 0.0;
    double rank10 = 0.0;
    size_t n_queries = 0;
    std::string config_hash;
};

// Embeds the manifest's query captions and gallery images with the checkpoint
// model (unified PGU features when the checkpoint was fine-tuned with gamma=1)
// and scores Rank-1/5/10.
RankKReport evaluate(const Checkpoint& ckpt, const DatasetManifest& manifest);

// evaluate() against a manifest from a different generation config
RankKReport cross_domain_evaluate(const Checkpoint& ckpt, const DatasetManifest& manifest_b);

std::string report_table(const RankKReport& report);
nlohmann::json report_to_json(const RankKReport& report);

}  // namespace pretext
