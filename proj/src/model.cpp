#include "dvfi/model.hpp"

#include "dvfi/error.hpp"

namespace dvfi {

void DpaConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("DpaConfig: " + msg); };
  if (patch_size < 1 || embed_dim < 1 || window < 1 || input_size < 1 || mlp_ratio < 1)
    fail("all sizes must be positive");
  if (input_size % patch_size != 0)
    fail("input_size " + std::to_string(input_size) + " not divisible by patch_size " + std::to_string(patch_size));
  const int base = input_size / patch_size;
  if (base % 8 != 0)
    fail("patch grid " + std::to_string(base) + " must be divisible by 8 for three 2x2 merges");
  for (int s = 1; s <= 4; ++s) {
    const int res = stage_resolution(s), win = stage_window(s), dim = stage_dim(s);
    if (depths[s - 1] < 1) fail("stage " + std::to_string(s) + " needs at least one block");
    if (heads[s - 1] < 1 || dim % heads[s - 1] != 0)
      fail("stage " + std::to_string(s) + " width " + std::to_string(dim) + " not divisible by " +
           std::to_string(heads[s - 1]) + " heads");
    if (res % win != 0)
      fail("stage " + std::to_string(s) + " grid " + std::to_string(res) + " not divisible by window " +
           std::to_string(win));
    if (depths[s - 1] > 1 && res > win && win % 2 != 0) fail("shifted windows need an even window size");
  }
  if (deep_channels() % 16 != 0) fail("stage-4 width must be divisible by 16 for the x4 pixel shuffle");
}

nlohmann::json to_json(const DpaConfig& c) {
  return {{"patch_size", c.patch_size},
          {"embed_dim", c.embed_dim},
          {"depths", c.depths},
          {"heads", c.heads},
          {"window", c.window},
          {"input_size", c.input_size},
          {"mlp_ratio", c.mlp_ratio},
          {"pixelshuffle_enabled", c.pixelshuffle_enabled},
          {"image_difference_enabled", c.image_difference_enabled},
          {"aux_loss_enabled", c.aux_loss_enabled},
          {"siamese_enabled", c.siamese_enabled}};
}

DpaConfig config_from_json(const nlohmann::json& j) {
  DpaConfig c;
  try {
    c.patch_size = j.at("patch_size").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.depths = j.at("depths").get<std::array<int, 4>>();
    c.heads = j.at("heads").get<std::array<int, 4>>();
    c.window = j.at("window").get<int>();
    c.input_size = j.at("input_size").get<int>();
    c.mlp_ratio = j.value("mlp_ratio", 4);
    c.pixelshuffle_enabled = j.at("pixelshuffle_enabled").get<bool>();
    c.image_difference_enabled = j.at("image_difference_enabled").get<bool>();
    c.aux_loss_enabled = j.at("aux_loss_enabled").get<bool>();
    c.siamese_enabled = j.at("siamese_enabled").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string extractor_prefix(const DpaConfig& cfg, int frame) {
  return cfg.siamese_enabled ? "extract." : "extract" + std::to_string(frame) + ".";
}

std::vector<std::pair<std::string, nn::Shape>> parameter_shapes(const DpaConfig& cfg) {
  using nn::Index;
  std::vector<std::pair<std::string, nn::Shape>> out;
  auto add = [&](std::string name, nn::Shape shape) { out.emplace_back(std::move(name), std::move(shape)); };
  auto norm = [&](const std::string& p, Index d) {
    add(p + ".gamma", {d});
    add(p + ".beta", {d});
  };

  const int extractors = cfg.siamese_enabled ? 1 : 2;
  for (int e = 0; e < extractors; ++e) {
    const std::string p = extractor_prefix(cfg, e);
    const Index embed = cfg.embed_dim;
    add(p + "patch_embed.weight", {embed, 3, cfg.patch_size, cfg.patch_size});
    add(p + "patch_embed.bias", {embed});
    norm(p + "patch_embed.norm", embed);
    for (int s = 1; s <= 4; ++s) {
      const Index d = cfg.stage_dim(s);
      if (s > 1) {
        const std::string m = p + "merge" + std::to_string(s - 1);
        norm(m + ".norm", 2 * d);
        add(m + ".reduction.weight", {2 * d, d});
      }
      for (int b = 0; b < cfg.depths[s - 1]; ++b) {
        const std::string blk = p + "stage" + std::to_string(s) + ".block" + std::to_string(b);
        const Index hidden = d * cfg.mlp_ratio;
        norm(blk + ".norm1", d);
        add(blk + ".attn.qkv.weight", {d, 3 * d});
        add(blk + ".attn.qkv.bias", {3 * d});
        add(blk + ".attn.proj.weight", {d, d});
        add(blk + ".attn.proj.bias", {d});
        norm(blk + ".norm2", d);
        add(blk + ".mlp.fc1.weight", {d, hidden});
        add(blk + ".mlp.fc1.bias", {hidden});
        add(blk + ".mlp.fc2.weight", {hidden, d});
        add(blk + ".mlp.fc2.bias", {d});
      }
    }
  }

  const Index c2 = cfg.shallow_channels(), c4 = cfg.deep_channels();
  const Index aligned_in = cfg.pixelshuffle_enabled ? c4 / 16 : c4;
  add("fuse.reduce.weight", {c2, aligned_in, 1, 1});
  add("fuse.reduce.bias", {c2});
  add("fuse.offset.weight", {18, c2, 3, 3});
  add("fuse.offset.bias", {18});
  add("fuse.deform.weight", {c2, c2, 3, 3});
  add("fuse.deform.bias", {c2});
  const Index fused_in = (cfg.image_difference_enabled ? 6 : 4) * c2;
  add("fuse.out.weight", {c2, fused_in, 3, 3});
  add("fuse.out.bias", {c2});
  for (const char* branch : {"head.score", "head.attention"}) {
    const std::string b(branch);
    add(b + ".conv1.weight", {c2, c2, 3, 3});
    add(b + ".conv1.bias", {c2});
    add(b + ".conv2.weight", {1, c2, 3, 3});
    add(b + ".conv2.bias", {1});
  }
  return out;
}

} // namespace dvfi
