#include "snaptraj/svg.hpp"

#include <fstream>

#include "snaptraj/error.hpp"

namespace snaptraj::svg {
namespace {

std::string escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

Writer::Writer(double width, double height) : width_(width), height_(height) {}

void Writer::line(double x1, double y1, double x2, double y2,
                  const std::string& stroke, double stroke_width) {
  body_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2
        << "\" y2=\"" << y2 << "\" stroke=\"" << stroke << "\" stroke-width=\""
        << stroke_width << "\"/>\n";
}

void Writer::polyline(const std::vector<std::pair<double, double>>& pts,
                      const std::string& stroke, double stroke_width) {
  body_ << "<polyline fill=\"none\" stroke=\"" << stroke
        << "\" stroke-width=\"" << stroke_width << "\" points=\"";
  for (const auto& [x, y] : pts) body_ << x << ',' << y << ' ';
  body_ << "\"/>\n";
}

void Writer::circle(double cx, double cy, double r, const std::string& fill) {
  body_ << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"" << r
        << "\" fill=\"" << fill << "\"/>\n";
}

void Writer::rect(double x, double y, double w, double h,
                  const std::string& fill, double opacity) {
  body_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w
        << "\" height=\"" << h << "\" fill=\"" << fill << "\" opacity=\""
        << opacity << "\"/>\n";
}

void Writer::text(double x, double y, const std::string& content, double size,
                  const std::string& fill) {
  body_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size
        << "\" font-family=\"sans-serif\" fill=\"" << fill << "\">"
        << escape(content) << "</text>\n";
}

std::string Writer::str() const {
  std::ostringstream out;
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width_
      << "\" height=\"" << height_ << "\" viewBox=\"0 0 " << width_ << ' '
      << height_ << "\">\n"
      << body_.str() << "</svg>\n";
  return out.str();
}

void Writer::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) raise(ErrorCode::Io, "cannot write svg: " + path);
  out << str();
}

}  // namespace snaptraj::svg
