// Writes tests/data/golden_logits.f32: raw little-endian float32 logits of a
// fixed-seed model on a fixed sentence. Rerun only when a numerical change to
// the forward pass is intended.
#include <fstream>
#include <iostream>

#include "tqpt/corpus.hpp"
#include "tqpt/model.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: tqpt_make_golden <output.f32>\n";
    return 2;
  }
  tqpt::ModelConfig c;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_blocks = 2;
  c.d_ff = 64;
  c.max_seq_len = 48;
  const tqpt::Model m = tqpt::Model::initialized(c, 20240917);
  const tqpt::Tensor logits = m.forward(tqpt::tokenize("Ada carried the silver lantern near the harbor."));
  std::ofstream out(argv[1], std::ios::binary);
  out.write(reinterpret_cast<const char*>(logits.data().data()),
            static_cast<std::streamsize>(logits.size() * sizeof(float)));
  return out ? 0 : 1;
}
