#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace refrec {

// Per-token vectors for one phrase, row-major [rows x cols].
struct TokenMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

// Fixed-length vector for one referring expression after pooling + PCA.
struct PhraseEmbedding {
  std::vector<double> values;
  std::string phrase;
};

struct PcaModel {
  int input_dim = 0;
  int output_dim = 0;
  std::vector<double> mean;                // input_dim
  std::vector<double> components;          // output_dim x input_dim, row-major
  std::vector<double> explained_variance;  // output_dim, non-increasing

  double component(int k, int d) const {
    return components[static_cast<std::size_t>(k) * input_dim + d];
  }
};

// Deterministic stand-in for an external language model: one row per
// whitespace token, each row a pure function of the token string.
TokenMatrix toy_encode(const std::string& phrase, int dim);

std::vector<double> mean_pool(const TokenMatrix& tokens);

// Top-k principal components of the sample covariance, extracted by power
// iteration with deflation. Component signs are fixed so the
// largest-magnitude coordinate is positive.
PcaModel pca_fit(const std::vector<std::vector<double>>& samples, int k);

PhraseEmbedding pca_transform(const PcaModel& model, const std::vector<double>& v,
                              std::string phrase = {});

// One record per line: `phrase<TAB>v1,v2,...,vD`; '#' lines are comments.
std::map<std::string, std::vector<double>> load_embedding_file(const std::filesystem::path& path);
void write_embedding_file(const std::filesystem::path& path,
                          const std::map<std::string, std::vector<double>>& entries);

}  // namespace refrec
