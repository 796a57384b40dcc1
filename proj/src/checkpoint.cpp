#include "eva/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace eva {

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"d_model", c.d_model},
                     {"d_mlp", c.d_mlp},
                     {"n_heads", c.n_heads},
                     {"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len},
                     {"visual_prefix_len", c.visual_prefix_len},
                     {"descriptor_dim", c.descriptor_dim},
                     {"activation", c.activation},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("d_model").get_to(c.d_model);
  j.at("d_mlp").get_to(c.d_mlp);
  j.at("n_heads").get_to(c.n_heads);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("visual_prefix_len").get_to(c.visual_prefix_len);
  j.at("descriptor_dim").get_to(c.descriptor_dim);
  j.at("activation").get_to(c.activation);
  j.at("seed").get_to(c.seed);
}

void atomic_write_file(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void for_each_array(Params& p, const std::function<void(double*, Eigen::Index)>& fn) {
  fn(p.tok_emb.data(), p.tok_emb.size());
  fn(p.pos_emb.data(), p.pos_emb.size());
  for (auto& l : p.layers) {
    fn(l.attn_norm.data(), l.attn_norm.size());
    fn(l.w_q.data(), l.w_q.size());
    fn(l.w_k.data(), l.w_k.size());
    fn(l.w_v.data(), l.w_v.size());
    fn(l.w_o.data(), l.w_o.size());
    fn(l.mlp_norm.data(), l.mlp_norm.size());
    fn(l.w_gate.data(), l.w_gate.size());
    fn(l.w_up.data(), l.w_up.size());
    fn(l.w_down.data(), l.w_down.size());
  }
  fn(p.final_norm.data(), p.final_norm.size());
  fn(p.unembed.data(), p.unembed.size());
  fn(p.projector.data(), p.projector.size());
}

void for_each_array(const Params& p, const std::function<void(const double*, Eigen::Index)>& fn) {
  for_each_array(const_cast<Params&>(p),
                 [&](double* d, Eigen::Index n) { fn(d, n); });
}

Params make_zero_params(const ModelConfig& c) {
  Params p;
  p.tok_emb = Matrix::Zero(c.vocab_size, c.d_model);
  p.pos_emb = Matrix::Zero(c.max_seq_len, c.d_model);
  p.layers.resize(c.n_layers);
  for (auto& l : p.layers) {
    l.attn_norm = Vector::Zero(c.d_model);
    l.w_q = Matrix::Zero(c.d_model, c.d_model);
    l.w_k = Matrix::Zero(c.d_model, c.d_model);
    l.w_v = Matrix::Zero(c.d_model, c.d_model);
    l.w_o = Matrix::Zero(c.d_model, c.d_model);
    l.mlp_norm = Vector::Zero(c.d_model);
    l.w_gate = Matrix::Zero(c.d_mlp, c.d_model);
    l.w_up = Matrix::Zero(c.d_mlp, c.d_model);
    l.w_down = Matrix::Zero(c.d_model, c.d_mlp);
  }
  p.final_norm = Vector::Zero(c.d_model);
  p.unembed = Matrix::Zero(c.vocab_size, c.d_model);
  p.projector = Matrix::Zero(static_cast<Eigen::Index>(c.visual_prefix_len) * c.d_model,
                             c.descriptor_dim);
  return p;
}

ModelCheckpoint init_checkpoint(const ModelConfig& config) {
  config.validate();
  ModelCheckpoint ckpt{config, make_zero_params(config)};
  for (auto& l : ckpt.params.layers) {
    l.attn_norm.setOnes();
    l.mlp_norm.setOnes();
  }
  ckpt.params.final_norm.setOnes();
  Rng rng(config.seed, "init");
  const double std0 = 0.08;
  auto fill = [&](Matrix& m, double s) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = s * rng.normal();
  };
  fill(ckpt.params.tok_emb, std0);
  fill(ckpt.params.pos_emb, std0);
  for (auto& l : ckpt.params.layers) {
    fill(l.w_q, std0);
    fill(l.w_k, std0);
    fill(l.w_v, std0);
    fill(l.w_o, std0);
    fill(l.w_gate, std0);
    fill(l.w_up, std0);
    fill(l.w_down, std0);
  }
  fill(ckpt.params.unembed, std0);
  fill(ckpt.params.projector, std0);
  return ckpt;
}

void check_shapes(const ModelCheckpoint& ckpt) {
  const ModelConfig& c = ckpt.config;
  c.validate();
  const Params& p = ckpt.params;
  auto expect = [](bool ok, const std::string& what) {
    if (!ok) throw ValidationError("checkpoint shape mismatch: " + what);
  };
  expect(p.tok_emb.rows() == c.vocab_size && p.tok_emb.cols() == c.d_model, "tok_emb");
  expect(p.pos_emb.rows() == c.max_seq_len && p.pos_emb.cols() == c.d_model, "pos_emb");
  expect(static_cast<int>(p.layers.size()) == c.n_layers, "layer count");
  for (const auto& l : p.layers) {
    expect(l.attn_norm.size() == c.d_model, "attn_norm");
    expect(l.w_q.rows() == c.d_model && l.w_q.cols() == c.d_model, "w_q");
    expect(l.w_k.rows() == c.d_model && l.w_k.cols() == c.d_model, "w_k");
    expect(l.w_v.rows() == c.d_model && l.w_v.cols() == c.d_model, "w_v");
    expect(l.w_o.rows() == c.d_model && l.w_o.cols() == c.d_model, "w_o");
    expect(l.mlp_norm.size() == c.d_model, "mlp_norm");
    expect(l.w_gate.rows() == c.d_mlp && l.w_gate.cols() == c.d_model, "w_gate");
    expect(l.w_up.rows() == c.d_mlp && l.w_up.cols() == c.d_model, "w_up");
    expect(l.w_down.rows() == c.d_model && l.w_down.cols() == c.d_mlp, "w_down");
  }
  expect(p.final_norm.size() == c.d_model, "final_norm");
  expect(p.unembed.rows() == c.vocab_size && p.unembed.cols() == c.d_model, "unembed");
  expect(p.projector.rows() == static_cast<Eigen::Index>(c.visual_prefix_len) * c.d_model &&
             p.projector.cols() == c.descriptor_dim,
         "projector");
  bool finite = true;
  for_each_array(p, [&](const double* d, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i)
      if (!std::isfinite(d[i])) finite = false;
  });
  if (!finite) throw NumericalError("checkpoint contains non-finite parameters");
}

namespace {

constexpr char kMagic[4] = {'E', 'V', 'A', 'C'};
constexpr uint16_t kFormatVersion = 1;

template <typename T>
void append_pod(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T read_pod(const std::string& bytes, size_t& off) {
  if (off + sizeof(T) > bytes.size())
    throw CheckpointError(CheckpointFault::truncated, "checkpoint file truncated in header");
  T v;
  std::memcpy(&v, bytes.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

std::string serialize(const ModelCheckpoint& ckpt) {
  std::string out;
  out.append(kMagic, 4);
  append_pod<uint16_t>(out, kFormatVersion);
  nlohmann::json header = ckpt.config;
  std::string header_str = header.dump();
  append_pod<uint32_t>(out, static_cast<uint32_t>(header_str.size()));
  out += header_str;
  for_each_array(ckpt.params, [&](const double* d, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) append_pod<float>(out, static_cast<float>(d[i]));
  });
  return out;
}

}  // namespace

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path) {
  check_shapes(ckpt);
  atomic_write_file(path, serialize(ckpt));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::string bytes = read_file(path);
  size_t off = 0;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError(CheckpointFault::bad_magic, "not a checkpoint file: " + path.string());
  off = 4;
  uint16_t version = read_pod<uint16_t>(bytes, off);
  if (version != kFormatVersion)
    throw CheckpointError(CheckpointFault::version_mismatch,
                          "unsupported checkpoint format version " + std::to_string(version));
  uint32_t header_len = read_pod<uint32_t>(bytes, off);
  if (off + header_len > bytes.size())
    throw CheckpointError(CheckpointFault::truncated, "checkpoint file truncated in header");
  ModelConfig config;
  try {
    config = nlohmann::json::parse(bytes.substr(off, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointFault::header_mismatch,
                          std::string("bad checkpoint header: ") + e.what());
  }
  off += header_len;
  config.validate();

  ModelCheckpoint ckpt{config, make_zero_params(config)};
  size_t expected = 0;
  for_each_array(ckpt.params,
                 [&](const double*, Eigen::Index n) { expected += static_cast<size_t>(n); });
  size_t available = (bytes.size() - off) / sizeof(float);
  if (available < expected)
    throw CheckpointError(CheckpointFault::truncated,
                          "checkpoint file truncated: expected " + std::to_string(expected) +
                              " f32 values, found " + std::to_string(available));
  if (available > expected)
    throw CheckpointError(CheckpointFault::header_mismatch,
                          "checkpoint array length disagrees with header: expected " +
                              std::to_string(expected) + " f32 values, found " +
                              std::to_string(available));
  for_each_array(ckpt.params, [&](double* d, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, bytes.data() + off, sizeof(float));
      off += sizeof(float);
      d[i] = static_cast<double>(f);
    }
  });
  check_shapes(ckpt);
  return ckpt;
}

uint64_t checkpoint_digest(const ModelCheckpoint& ckpt) {
  std::string bytes = serialize(ckpt);
  return fnv1a(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(bytes.data()),
                                        bytes.size()));
}

}  // namespace eva
