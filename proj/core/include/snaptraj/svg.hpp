#pragma once

#include <sstream>
#include <string>
#include <vector>

namespace snaptraj::svg {

/// Minimal SVG document builder; enough for path plots, bar charts and
/// heat maps.  Coordinates are raw document units.
class Writer {
public:
  Writer(double width, double height);

  void line(double x1, double y1, double x2, double y2,
            const std::string& stroke = "#444", double stroke_width = 1.0);
  void polyline(const std::vector<std::pair<double, double>>& pts,
                const std::string& stroke = "#1f77b4",
                double stroke_width = 1.5);
  void circle(double cx, double cy, double r,
              const std::string& fill = "#d62728");
  void rect(double x, double y, double w, double h, const std::string& fill,
            double opacity = 1.0);
  void text(double x, double y, const std::string& content,
            double size = 12.0, const std::string& fill = "#222");

  std::string str() const;
  void save(const std::string& path) const;

private:
  double width_;
  double height_;
  std::ostringstream body_;
};

}  // namespace snaptraj::svg
