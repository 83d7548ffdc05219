#include "protomil/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "protomil/checkpoint.hpp"
#include "protomil/error.hpp"
#include "protomil/tensor_io.hpp"
#include "protomil/viridis_lut.hpp"

namespace protomil {

using nlohmann::json;

Tensor<float> bilinear_upsample(const Tensor<float>& map, std::size_t height, std::size_t width) {
  if (map.rank() != 2 || map.size() == 0) throw DimensionError("bilinear_upsample expects a nonempty 2-D map");
  const std::size_t h = map.dim(0), w = map.dim(1);
  Tensor<float> out({height, width});
  auto coord = [](std::size_t dst, std::size_t src_n, std::size_t dst_n, std::size_t& i0, std::size_t& i1, double& t) {
    double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(src_n) / static_cast<double>(dst_n) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src_n - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, src_n - 1);
    t = s - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double ty;
    coord(y, h, height, y0, y1, ty);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double tx;
      coord(x, w, width, x0, x1, tx);
      const double top = map.at(y0, x0) * (1 - tx) + map.at(y0, x1) * tx;
      const double bottom = map.at(y1, x0) * (1 - tx) + map.at(y1, x1) * tx;
      out.at(y, x) = static_cast<float>(top * (1 - ty) + bottom * ty);
    }
  }
  return out;
}

CropBox percentile_box(const Tensor<float>& heat, double percentile) {
  if (heat.rank() != 2 || heat.size() == 0) throw DimensionError("percentile_box expects a nonempty 2-D map");
  std::vector<float> sorted(heat.values().begin(), heat.values().end());
  std::sort(sorted.begin(), sorted.end());
  const auto rank = static_cast<std::size_t>(std::ceil(percentile * static_cast<double>(sorted.size())));
  const float threshold = sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
  CropBox box{heat.dim(1), heat.dim(0), 0, 0};
  for (std::size_t y = 0; y < heat.dim(0); ++y) {
    for (std::size_t x = 0; x < heat.dim(1); ++x) {
      if (heat.at(y, x) < threshold) continue;
      box.x0 = std::min(box.x0, x);
      box.y0 = std::min(box.y0, y);
      box.x1 = std::max(box.x1, x + 1);
      box.y1 = std::max(box.y1, y + 1);
    }
  }
  return box;
}

namespace {

const Bag* find_bag(const BagSet& dataset, const PatchRef& ref) {
  if (ref.bag_index < dataset.size() && dataset[ref.bag_index].id == ref.bag_id) return &dataset[ref.bag_index];
  for (const auto& b : dataset)
    if (b.id == ref.bag_id) return &b;
  return nullptr;
}

Tensor<float> map_slice(const Tensor<float>& maps, std::size_t i, std::size_t j) {
  const std::size_t mh = maps.dim(2), mw = maps.dim(3);
  const float* src = maps.data() + (i * maps.dim(1) + j) * mh * mw;
  return Tensor<float>({mh, mw}, std::vector<float>(src, src + mh * mw));
}

}  // namespace

ExplanationMatrix build_explanation(const BagForwardTrace<float>& trace, const ProtoMilModel<float>& model,
                                    const BagSet& dataset, const std::vector<PrototypeCensus>& census,
                                    const ExplainOptions& options) {
  if (trace.num_prototypes() != model.bank().size()) throw DimensionError("trace does not belong to this model");
  if (trace.activation_maps.rank() != 4) throw InvalidInputError("trace lacks activation maps");
  ExplanationMatrix m;
  m.bag_id = trace.bag_id;
  m.probability = trace.probability();
  for (const auto& b : dataset) {
    if (b.id == trace.bag_id) m.label = b.label;
  }

  std::vector<std::size_t> order(trace.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return trace.attention_weight(a) > trace.attention_weight(b);
  });
  order.resize(std::min(options.top_instances, order.size()));
  m.instances = order;
  for (std::size_t i : order) m.attention.push_back(trace.attention_weight(i));

  const auto& bank = model.bank();
  const auto& head = model.head().weights.value;
  for (int label = 0; label < static_cast<int>(kNumClasses); ++label) {
    std::vector<std::size_t> rows;
    for (std::size_t j = 0; j < bank.size(); ++j)
      if (bank.slots[j].active && bank.slots[j].label == label) rows.push_back(j);
    if (options.max_prototypes_per_class > 0 && rows.size() > options.max_prototypes_per_class) {
      std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
        return head.at(label, a) > head.at(label, b);
      });
      rows.resize(options.max_prototypes_per_class);
      std::sort(rows.begin(), rows.end());
    }
    for (std::size_t j : rows) {
      ExplanationPrototype p;
      p.index = j;
      p.label = label;
      p.head_weight = head.at(label, j);
      p.provenance = bank.slots[j].provenance;
      for (const auto& c : census)
        if (c.prototype == j) p.nearest = c.neighbors;
      if (p.provenance) {
        if (const Bag* src = find_bag(dataset, *p.provenance); src && p.provenance->instance < src->size()) {
          const Instance& inst = src->instances[p.provenance->instance];
          if (inst.has_pixels()) {
            const auto src_trace = model.infer(Bag{src->id, src->label, {inst}});
            const Tensor<float> heat = bilinear_upsample(map_slice(src_trace.activation_maps, 0, j),
                                                         inst.pixels().dim(1), inst.pixels().dim(2));
            p.crop = percentile_box(heat, options.crop_percentile);
          }
        }
      }
      std::vector<ExplanationCell> row;
      for (std::size_t i : m.instances) row.push_back({trace.similarities.at(i, j), map_slice(trace.activation_maps, i, j)});
      m.prototypes.push_back(std::move(p));
      m.cells.push_back(std::move(row));
    }
  }
  return m;
}

json to_json(const ExplanationMatrix& m) {
  json protos = json::array();
  for (const auto& p : m.prototypes) {
    json nearest = json::array();
    for (const auto& n : p.nearest)
      nearest.push_back({{"patch", to_json(n.patch)}, {"label", n.label}, {"sq_distance", n.sq_distance}});
    json crop = nullptr;
    if (p.crop) crop = {{"x0", p.crop->x0}, {"y0", p.crop->y0}, {"x1", p.crop->x1}, {"y1", p.crop->y1}};
    protos.push_back({{"index", p.index},
                      {"class", p.label},
                      {"head_weight", p.head_weight},
                      {"provenance", p.provenance ? to_json(*p.provenance) : json(nullptr)},
                      {"crop", crop},
                      {"nearest", nearest}});
  }
  json cells = json::array();
  for (const auto& row : m.cells) {
    json r = json::array();
    for (const auto& c : row) {
      r.push_back({{"score", c.score}, {"map_shape", c.activation_map.shape()}, {"map", c.activation_map.values()}});
    }
    cells.push_back(r);
  }
  return {{"format", "protomil-explanation"},
          {"format_version", kExplanationFormatVersion},
          {"bag_id", m.bag_id},
          {"label", m.label},
          {"probability", m.probability},
          {"instances", m.instances},
          {"attention", m.attention},
          {"prototypes", protos},
          {"cells", cells}};
}

ExplanationMatrix explanation_from_json(const json& j) {
  try {
    if (j.at("format") != "protomil-explanation" || j.at("format_version") != kExplanationFormatVersion) {
      throw SchemaError("not a supported explanation document");
    }
    ExplanationMatrix m;
    m.bag_id = j.at("bag_id");
    m.label = j.at("label");
    m.probability = j.at("probability");
    m.instances = j.at("instances").get<std::vector<std::size_t>>();
    m.attention = j.at("attention").get<std::vector<float>>();
    for (const auto& p : j.at("prototypes")) {
      ExplanationPrototype e;
      e.index = p.at("index");
      e.label = p.at("class");
      e.head_weight = p.at("head_weight");
      if (!p.at("provenance").is_null()) e.provenance = patch_ref_from_json(p.at("provenance"));
      if (!p.at("crop").is_null()) {
        const auto& c = p.at("crop");
        e.crop = CropBox{c.at("x0"), c.at("y0"), c.at("x1"), c.at("y1")};
      }
      for (const auto& n : p.at("nearest"))
        e.nearest.push_back({patch_ref_from_json(n.at("patch")), n.at("label"), n.at("sq_distance")});
      m.prototypes.push_back(std::move(e));
    }
    for (const auto& row : j.at("cells")) {
      std::vector<ExplanationCell> r;
      for (const auto& c : row) {
        r.push_back({c.at("score").get<float>(),
                     Tensor<float>(c.at("map_shape").get<Shape>(), c.at("map").get<std::vector<float>>())});
      }
      m.cells.push_back(std::move(r));
    }
    return m;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("explanation document: ") + e.what());
  }
}

namespace {

// 3 x 5 glyphs, one row per string, for the characters used in scores.
const char* glyph(char ch) {
  switch (ch) {
    case '0': return "111101101101111";
    case '1': return "010110010010111";
    case '2': return "111001111100111";
    case '3': return "111001111001111";
    case '4': return "101101111001001";
    case '5': return "111100111001111";
    case '6': return "111100111101111";
    case '7': return "111001001001001";
    case '8': return "111101111101111";
    case '9': return "111101111001111";
    case '.': return "000000000000010";
    case '-': return "000000111000000";
    default: return "000000000000000";
  }
}

constexpr std::size_t kFontScale = 2;
constexpr std::size_t kTextHeight = 5 * kFontScale + 4;
constexpr std::size_t kMargin = 4;
constexpr float kHeatAlpha = 0.5f;

void draw_text(Image8& img, std::size_t x, std::size_t y, const std::string& text) {
  for (char ch : text) {
    const char* g = glyph(ch);
    for (std::size_t gy = 0; gy < 5; ++gy)
      for (std::size_t gx = 0; gx < 3; ++gx) {
        if (g[gy * 3 + gx] != '1') continue;
        for (std::size_t sy = 0; sy < kFontScale; ++sy)
          for (std::size_t sx = 0; sx < kFontScale; ++sx) {
            const std::size_t px = x + gx * kFontScale + sx, py = y + gy * kFontScale + sy;
            if (px < img.width && py < img.height) std::fill_n(img.at(px, py), 3, std::uint8_t{0});
          }
      }
    x += 4 * kFontScale;
  }
}

void draw_rect(Image8& img, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1,
               std::array<std::uint8_t, 3> color, std::size_t thickness) {
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) {
      const bool edge = y < y0 + thickness || y + thickness >= y1 || x < x0 + thickness || x + thickness >= x1;
      if (edge && x < img.width && y < img.height) std::copy(color.begin(), color.end(), img.at(x, y));
    }
}

std::uint8_t gray_at(const Tensor<float>& chw, std::size_t y, std::size_t x) {
  float v = 0;
  for (std::size_t c = 0; c < chw.dim(0); ++c) v += chw.at(c, y, x);
  v /= static_cast<float>(chw.dim(0));
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

std::string format_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

const std::array<std::uint8_t, 3>& lut(float v) {
  const auto idx = static_cast<std::size_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  return kViridis[idx];
}

}  // namespace

Image8 render_explanation_image(const ExplanationMatrix& m, const Bag& bag, const BagSet& dataset) {
  if (bag.id != m.bag_id) throw InvalidInputError("bag " + bag.id + " does not match explanation " + m.bag_id);
  for (std::size_t i : m.instances)
    if (i >= bag.size()) throw DimensionError("explanation references instance beyond the bag");
  const bool pixels = !bag.instances.empty() && bag.instances.front().has_pixels();
  std::size_t ih = 16, iw = 16;
  if (pixels) {
    ih = bag.instances.front().pixels().dim(1);
    iw = bag.instances.front().pixels().dim(2);
  }
  const std::size_t scale = std::max<std::size_t>(1, 96 / std::max(ih, iw));
  const std::size_t ch = ih * scale, cw = iw * scale;
  const std::size_t cols = m.instances.size() + 1, rows = m.prototypes.size() + 1;
  Image8 img(kMargin + cols * (cw + kMargin), kMargin + rows * (ch + kTextHeight + kMargin), 3, 255);

  auto origin = [&](std::size_t r, std::size_t c) {
    return std::pair{kMargin + c * (cw + kMargin), kMargin + r * (ch + kTextHeight + kMargin)};
  };
  auto blit_instance = [&](const Tensor<float>& chw, std::size_t ox, std::size_t oy) {
    for (std::size_t y = 0; y < ch; ++y)
      for (std::size_t x = 0; x < cw; ++x) std::fill_n(img.at(ox + x, oy + y), 3, gray_at(chw, y / scale, x / scale));
  };

  // Header: instances ordered by attention.
  for (std::size_t c = 0; c < m.instances.size(); ++c) {
    const auto [ox, oy] = origin(0, c + 1);
    if (pixels) blit_instance(bag.instances[m.instances[c]].pixels(), ox, oy);
    else draw_rect(img, ox, oy, ox + cw, oy + ch, {200, 200, 200}, ch);
    draw_text(img, ox, oy + ch + 2, format_score(m.attention[c]));
  }

  float max_score = 0;
  for (const auto& row : m.cells)
    for (const auto& cell : row) max_score = std::max(max_score, cell.score);

  for (std::size_t r = 0; r < m.prototypes.size(); ++r) {
    const auto& p = m.prototypes[r];
    const std::array<std::uint8_t, 3> frame = p.label == 1 ? std::array<std::uint8_t, 3>{200, 40, 40}
                                                           : std::array<std::uint8_t, 3>{40, 80, 200};
    const auto [px, py] = origin(r + 1, 0);
    const Bag* src = nullptr;
    if (p.provenance) {
      for (const auto& b : dataset)
        if (b.id == p.provenance->bag_id) src = &b;
    }
    if (pixels && src && p.provenance->instance < src->size() && src->instances[p.provenance->instance].has_pixels()) {
      blit_instance(src->instances[p.provenance->instance].pixels(), px, py);
      if (p.crop) {
        draw_rect(img, px + p.crop->x0 * scale, py + p.crop->y0 * scale, px + p.crop->x1 * scale,
                  py + p.crop->y1 * scale, {255, 220, 0}, 2);
      }
    } else {
      draw_rect(img, px, py, px + cw, py + ch, {230, 230, 230}, ch);
    }
    draw_rect(img, px, py, px + cw, py + ch, frame, 2);
    draw_text(img, px, py + ch + 2, std::to_string(p.index));

    for (std::size_t c = 0; c < m.instances.size(); ++c) {
      const auto& cell = m.cells[r][c];
      const auto [ox, oy] = origin(r + 1, c + 1);
      if (pixels) {
        const Tensor<float>& inst = bag.instances[m.instances[c]].pixels();
        const Tensor<float> heat = bilinear_upsample(cell.activation_map, ih, iw);
        const auto [lo_it, hi_it] = std::minmax_element(heat.values().begin(), heat.values().end());
        const float lo = *lo_it, span = *hi_it - *lo_it;
        for (std::size_t y = 0; y < ch; ++y)
          for (std::size_t x = 0; x < cw; ++x) {
            const float v = span > 0 ? (heat.at(y / scale, x / scale) - lo) / span : 0.0f;
            const auto& color = lut(v);
            const float g = gray_at(inst, y / scale, x / scale);
            auto* dst = img.at(ox + x, oy + y);
            for (std::size_t k = 0; k < 3; ++k) {
              dst[k] = static_cast<std::uint8_t>(std::lround((1 - kHeatAlpha) * g + kHeatAlpha * color[k]));
            }
          }
      } else {
        draw_rect(img, ox, oy, ox + cw, oy + ch, lut(max_score > 0 ? cell.score / max_score : 0.0f), ch);
      }
      draw_text(img, ox, oy + ch + 2, format_score(cell.score));
    }
  }
  return img;
}

ExplanationFiles render_explanation(const ExplanationMatrix& m, const Bag& bag, const BagSet& dataset,
                                    const std::filesystem::path& out_dir) {
  ExplanationFiles files{out_dir / (m.bag_id + ".png"), out_dir / (m.bag_id + ".json")};
  write_png(files.image, render_explanation_image(m, bag, dataset));
  write_text_file(files.json, to_json(m).dump(1) + "\n");
  return files;
}

}  // namespace protomil
