#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include <png.h>
#include <json.hpp>

#include "mmgl/pipeline.hpp"
#include "mmgl/report.hpp"

namespace mmgl {
namespace {

using nlohmann::json;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

constexpr std::array<std::array<std::uint8_t, 3>, kNumClasses> kPalette{{{0, 0, 0},
                                                                        {230, 25, 75},
                                                                        {60, 180, 75},
                                                                        {255, 225, 25},
                                                                        {0, 130, 200},
                                                                        {245, 130, 48},
                                                                        {145, 30, 180},
                                                                        {70, 240, 240}}};

double metric_of(const MetricsRecord& r, const std::string& metric) {
  if (metric == "mean_dice") return r.mean_dice;
  if (metric == "miou") return r.miou;
  if (metric == "pixacc") return r.pixacc;
  throw Error(ErrorKind::invalid_input, "unknown metric '" + metric + "'");
}

}  // namespace

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorKind::io, "cannot write " + path.string());
  f << text;
  require(static_cast<bool>(f), ErrorKind::io, "short write to " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::missing_file, path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string metrics_csv(const std::vector<MetricsRecord>& records) {
  std::string out = "run,seed,labeled_fraction";
  for (int c = 1; c < kNumClasses; ++c) out += ",class_" + std::to_string(c) + "_dice";
  out += ",mean_dice,miou,pixacc\n";
  for (const auto& r : records) {
    out += r.run + "," + std::to_string(r.seed) + "," + num(r.labeled_fraction);
    for (double d : r.class_dice) out += "," + num(d);
    out += "," + num(r.mean_dice) + "," + num(r.miou) + "," + num(r.pixacc) + "\n";
  }
  if (records.empty()) return out;

  out += "\nrun,statistic,n";
  for (int c = 1; c < kNumClasses; ++c) out += ",class_" + std::to_string(c) + "_dice";
  out += ",mean_dice,miou,pixacc\n";
  std::vector<std::string> order;
  std::map<std::string, std::vector<const MetricsRecord*>> groups;
  for (const auto& r : records) {
    if (!groups.count(r.run)) order.push_back(r.run);
    groups[r.run].push_back(&r);
  }
  for (const auto& run : order) {
    const auto& g = groups[run];
    auto column = [&](auto get) {
      std::vector<double> v;
      for (const auto* r : g) v.push_back(get(*r));
      return v;
    };
    std::vector<std::vector<double>> cols;
    for (std::size_t c = 0; c < kForegroundClasses; ++c) cols.push_back(column([c](const MetricsRecord& r) { return r.class_dice[c]; }));
    cols.push_back(column([](const MetricsRecord& r) { return r.mean_dice; }));
    cols.push_back(column([](const MetricsRecord& r) { return r.miou; }));
    cols.push_back(column([](const MetricsRecord& r) { return r.pixacc; }));
    std::string mean_row = run + ",mean," + std::to_string(g.size());
    std::string std_row = run + ",std," + std::to_string(g.size());
    for (const auto& v : cols) {
      double m = 0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      double ss = 0;
      for (double x : v) ss += (x - m) * (x - m);
      mean_row += "," + num(m);
      std_row += "," + num(v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0);
    }
    out += mean_row + "\n" + std_row + "\n";
  }
  return out;
}

std::string metrics_json(const std::vector<MetricsRecord>& records) {
  json arr = json::array();
  for (const auto& r : records)
    arr.push_back({{"run", r.run},
                   {"seed", r.seed},
                   {"labeled_fraction", r.labeled_fraction},
                   {"class_dice", r.class_dice},
                   {"class_present", r.class_present},
                   {"mean_dice", r.mean_dice},
                   {"miou", r.miou},
                   {"pixacc", r.pixacc}});
  return json{{"records", arr}}.dump(2) + "\n";
}

std::vector<MetricsRecord> parse_metrics_json(const std::string& text) {
  std::vector<MetricsRecord> out;
  try {
    const json doc = json::parse(text);
    for (const auto& j : doc.at("records")) {
      MetricsRecord r;
      r.run = j.at("run");
      r.seed = j.at("seed");
      r.labeled_fraction = j.at("labeled_fraction");
      r.class_dice = j.at("class_dice");
      r.class_present = j.at("class_present");
      r.mean_dice = j.at("mean_dice");
      r.miou = j.at("miou");
      r.pixacc = j.at("pixacc");
      out.push_back(r);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::unreadable_format, std::string("metrics json: ") + e.what());
  }
  return out;
}

std::string journal_header() { return "stage,epoch,loss,level_2,level_3,level_4,val_dice,degenerate\n"; }

std::string journal_row(Stage stage, const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%d,%.9g,%.9g,%.9g,%.9g,%s,%d\n", to_string(stage).c_str(), r.epoch, r.loss, r.level[0],
                r.level[1], r.level[2], r.val_dice < 0 ? "" : num(r.val_dice).c_str(), r.degenerate);
  return buf;
}

std::string bar_chart_svg(const std::vector<MetricsRecord>& records, const std::string& metric) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> groups;
  for (const auto& r : records) {
    if (!groups.count(r.run)) order.push_back(r.run);
    groups[r.run].push_back(metric_of(r, metric));
  }
  const int bar = 60, gap = 30, left = 50, top = 30, plot_h = 240;
  const int width = left + static_cast<int>(order.size()) * (bar + gap) + gap;
  const int height = top + plot_h + 60;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << metric << " (mean +- std)</text>\n";
  auto y_of = [&](double v) { return top + plot_h - std::clamp(v, 0.0, 1.0) * plot_h; };
  for (int t = 0; t <= 4; ++t) {
    const double v = t / 4.0;
    s << "<line x1=\"" << left << "\" x2=\"" << width - 10 << "\" y1=\"" << y_of(v) << "\" y2=\"" << y_of(v) << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << left - 8 << "\" y=\"" << y_of(v) + 4 << "\" text-anchor=\"end\">" << num(v).substr(0, 4) << "</text>\n";
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& v = groups[order[i]];
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - m) * (x - m);
    const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    const int x = left + gap + static_cast<int>(i) * (bar + gap);
    const auto& c = kPalette[1 + i % (kNumClasses - 1)];
    s << "<rect x=\"" << x << "\" y=\"" << y_of(m) << "\" width=\"" << bar << "\" height=\"" << top + plot_h - y_of(m)
      << "\" fill=\"rgb(" << int(c[0]) << "," << int(c[1]) << "," << int(c[2]) << ")\"/>\n";
    const int cx = x + bar / 2;
    s << "<line x1=\"" << cx << "\" x2=\"" << cx << "\" y1=\"" << y_of(m - sd) << "\" y2=\"" << y_of(m + sd) << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << cx << "\" y=\"" << y_of(m) - 4 << "\" text-anchor=\"middle\">" << num(m).substr(0, 5) << "</text>\n";
    s << "<text x=\"" << cx << "\" y=\"" << top + plot_h + 16 << "\" text-anchor=\"middle\">" << order[i] << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

void write_overlay_png(const std::filesystem::path& path, const Image& slice, const LabelGrid& mask) {
  require(slice.rows() == mask.rows() && slice.cols() == mask.cols(), ErrorKind::shape_mismatch, "overlay slice and mask differ in size");
  const auto h = static_cast<png_uint_32>(slice.rows()), w = static_cast<png_uint_32>(slice.cols());
  std::vector<png_byte> rgb(static_cast<std::size_t>(h) * w * 3);
  for (Index y = 0; y < slice.rows(); ++y)
    for (Index x = 0; x < slice.cols(); ++x) {
      const double g = 255.0 * std::clamp(static_cast<double>(slice(y, x)), 0.0, 1.0);
      const auto k = mask(y, x);
      require(k < kNumClasses, ErrorKind::invalid_input, "overlay label out of range");
      png_byte* px = &rgb[(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * 3];
      for (int c = 0; c < 3; ++c) px[c] = static_cast<png_byte>(std::lround(k == 0 ? g : 0.5 * g + 0.5 * kPalette[k][static_cast<std::size_t>(c)]));
    }

  std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(path.c_str(), "wb"), &std::fclose);
  require(f != nullptr, ErrorKind::io, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::io, "png encoding failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (png_uint_32 y = 0; y < h; ++y) png_write_row(png, &rgb[static_cast<std::size_t>(y) * w * 3]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::pair<Index, Index> png_size(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> f(std::fopen(path.c_str(), "rb"), &std::fclose);
  require(f != nullptr, ErrorKind::missing_file, path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::unreadable_format, "not a png: " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const std::pair<Index, Index> out{png_get_image_height(png, info), png_get_image_width(png, info)};
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

std::vector<std::filesystem::path> emit_report(const std::vector<MetricsRecord>& records, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec && std::filesystem::is_directory(out_dir), ErrorKind::io, "cannot create " + out_dir.string());
  std::vector<std::filesystem::path> files{out_dir / "metrics.csv", out_dir / "metrics.json"};
  write_text(files[0], metrics_csv(records));
  write_text(files[1], metrics_json(records));
  if (records.empty()) return files;
  for (const char* metric : {"mean_dice", "miou", "pixacc"}) {
    files.push_back(out_dir / (std::string(metric) + ".svg"));
    write_text(files.back(), bar_chart_svg(records, metric));
  }
  return files;
}

std::vector<std::filesystem::path> emit_overlays(const Model& model, const LoadedVolume& volume, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec, ErrorKind::io, "cannot create " + out_dir.string());
  const Index z = volume.volume.shape().depth / 2;
  auto slices = slice_volume(volume.volume, volume.labels ? &*volume.labels : nullptr, ViewAxis::transaxial);
  const SliceSample& s = slices[static_cast<std::size_t>(z)];
  const Image norm = normalize_minmax(s.image);
  const LabelGrid pred = resize_nearest(model.predict(resize_slice(norm, model.config().input_size)), norm.rows(), norm.cols());
  std::vector<std::filesystem::path> files{out_dir / (volume.volume.id + "_pred.png")};
  write_overlay_png(files[0], norm, pred);
  if (s.mask) {
    files.push_back(out_dir / (volume.volume.id + "_truth.png"));
    write_overlay_png(files[1], norm, *s.mask);
  }
  return files;
}

}  // namespace mmgl
