#include "veil/sybil.hpp"

#include "veil/errors.hpp"

namespace veil {

void SybilSpec::validate() const {
  if (candidates.empty()) throw DatasetError("Sybil candidate pool is empty");
  if (anchors.empty()) throw DatasetError("Sybil spec has no anchor images");
  if (per_anchor < 1) throw ParamError("per_anchor must be >= 1");
  params.validate();
}

CloakResult make_sybil(const ExtractorSet& phis, const Image& candidate, const Image& anchor,
                       const CloakParams& params) {
  return compute_cloak(phis, candidate, anchor, params);
}

std::vector<SybilImage> build_sybil_set(const ExtractorSet& phis, const SybilSpec& spec,
                                        SeededRng& rng) {
  spec.validate();
  std::vector<std::size_t> pool;
  std::vector<Image> sources, targets;
  std::vector<SybilImage> out;
  for (std::size_t a = 0; a < spec.anchors.size(); ++a) {
    for (int k = 0; k < spec.per_anchor; ++k) {
      if (pool.empty()) {
        pool = rng.permutation(spec.candidates.size());
      }
      const std::size_t c = pool.back();
      pool.pop_back();
      SybilImage s;
      s.anchor_index = a;
      s.candidate_index = c;
      out.push_back(s);
      sources.push_back(spec.candidates[c]);
      targets.push_back(spec.anchors[a]);
    }
  }
  auto results = compute_cloaks(phis, sources, targets, spec.params);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].image = std::move(results[i].cloaked);
    out[i].initial_distance = results[i].initial_target_distance;
    out[i].final_distance = results[i].final_target_distance;
    out[i].final_dssim = results[i].final_dssim;
  }
  return out;
}

void write_sybil_manifest(std::ostream& os, const std::vector<SybilImage>& set,
                          const std::vector<std::string>& sybil_files,
                          const std::vector<std::string>& anchor_files) {
  os << "sybil_file,anchor_file,anchor_index,candidate_index,initial_distance,final_distance,final_dssim\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& s = set[i];
    os << (i < sybil_files.size() ? sybil_files[i] : "") << ','
       << (s.anchor_index < anchor_files.size() ? anchor_files[s.anchor_index] : "") << ','
       << s.anchor_index << ','
       << s.candidate_index << ',' << s.initial_distance << ',' << s.final_distance << ','
       << s.final_dssim << '\n';
  }
}

}  // namespace veil
