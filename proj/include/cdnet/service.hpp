#pragma once

// HTTP inference service over an immutable model snapshot. Request handling
// lives in InferenceService::handle so it can be exercised without sockets.

#include <cmath>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cdnet/checkpoint.hpp"
#include "cdnet/error.hpp"
#include "cdnet/manipulation.hpp"
#include "cdnet/network.hpp"

// Included after Eigen: resolv.h defines a _res macro that clashes with Eigen internals.
#include "httplib.h"

namespace cdnet {

struct ServiceResponse {
  int status = 200;
  nlohmann::json body;
};

/// Client-caused failure: 400 for malformed bodies, 422 for out-of-interval values.
class RequestError : public Error {
 public:
  RequestError(int status, std::string field, const std::string& message)
      : Error(field + ": " + message), status_(status), field_(std::move(field)) {}
  int status() const noexcept { return status_; }
  const std::string& field() const noexcept { return field_; }

 private:
  int status_;
  std::string field_;
};

class InferenceService {
 public:
  explicit InferenceService(Checkpoint checkpoint)
      : ck_(std::make_shared<const Checkpoint>(std::move(checkpoint))), model_(ck_->model()) {}

  const Checkpoint& checkpoint() const noexcept { return *ck_; }

  ServiceResponse handle(std::string_view method, std::string_view path, std::string_view body) const {
    try {
      if (path == "/model-info") {
        if (method != "GET") return method_not_allowed();
        return {200, model_info()};
      }
      const auto route = [&]() -> nlohmann::json (InferenceService::*)(const nlohmann::json&) const {
        if (path == "/encode") return &InferenceService::encode;
        if (path == "/edit") return &InferenceService::edit;
        if (path == "/decode") return &InferenceService::decode_request;
        return nullptr;
      }();
      if (!route) return {404, {{"error", "no such endpoint"}, {"path", std::string(path)}}};
      if (method != "POST") return method_not_allowed();
      nlohmann::json request;
      try {
        request = nlohmann::json::parse(body);
      } catch (const nlohmann::json::parse_error& e) {
        throw RequestError(400, "<body>", std::string("invalid JSON: ") + e.what());
      }
      if (!request.is_object()) throw RequestError(400, "<body>", "must be a JSON object");
      return {200, (this->*route)(request)};
    } catch (const RequestError& e) {
      return {e.status(), {{"error", e.what()}, {"field", e.field()}}};
    } catch (const EditRangeError& e) {
      return {422, {{"error", e.what()}, {"field", "edits"}}};
    } catch (const ShapeError& e) {
      return {400, {{"error", e.what()}}};
    } catch (const std::exception& e) {
      return {500, {{"error", e.what()}}};
    }
  }

  nlohmann::json model_info() const {
    const auto& ck = *ck_;
    return {{"image_shape", {ck.image_shape.height, ck.image_shape.width}},
            {"image_dim", ck.spec.image_dim},
            {"target_dim", ck.spec.target_dim},
            {"latent_dim", ck.spec.latent_dim},
            {"mode", to_string(ck.spec.mode)},
            {"attribute_names", ck.label_names},
            {"value_range", {ck.range.lo, ck.range.hi}},
            {"edit_interval", {ck.config.edit_interval.lo, ck.config.edit_interval.hi}}};
  }

 private:
  static ServiceResponse method_not_allowed() { return {405, {{"error", "method not allowed"}}}; }

  static std::vector<double> number_array(const nlohmann::json& req, const char* field) {
    auto it = req.find(field);
    if (it == req.end()) throw RequestError(400, field, "missing");
    if (!it->is_array()) throw RequestError(400, field, "must be an array of numbers");
    std::vector<double> out;
    out.reserve(it->size());
    for (const auto& v : *it) {
      if (!v.is_number()) throw RequestError(400, field, "must contain only numbers");
      out.push_back(v.get<double>());
      if (!std::isfinite(out.back())) throw RequestError(400, field, "must contain only finite numbers");
    }
    return out;
  }

  Tensor image(const nlohmann::json& req) const {
    const auto pixels = number_array(req, "image");
    const auto& shape = ck_->image_shape;
    if (auto it = req.find("shape"); it != req.end()) {
      if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number_unsigned() || !(*it)[1].is_number_unsigned()) {
        throw RequestError(400, "shape", "must be [height, width]");
      }
      if ((*it)[0].get<std::size_t>() != shape.height || (*it)[1].get<std::size_t>() != shape.width) {
        throw RequestError(400, "shape", "does not match the model's image shape");
      }
    }
    if (pixels.size() != ck_->spec.image_dim) {
      throw RequestError(400, "image",
                         "expected " + std::to_string(ck_->spec.image_dim) + " values, got " + std::to_string(pixels.size()));
    }
    return Tensor({1, pixels.size()}, pixels);
  }

  Tensor vector_field(const nlohmann::json& req, const char* field, std::size_t width) const {
    const auto values = number_array(req, field);
    if (values.size() != width) {
      throw RequestError(400, field, "expected " + std::to_string(width) + " values, got " + std::to_string(values.size()));
    }
    return Tensor({1, width}, values);
  }

  nlohmann::json image_json(const Tensor& t) const {
    return {{"image_out", t.storage()}, {"shape", {ck_->image_shape.height, ck_->image_shape.width}}};
  }

  nlohmann::json encode(const nlohmann::json& req) const {
    const Tensor x = image(req);
    return {{"y_hat", encode_y(model_, x).storage()}, {"z", encode_z(model_, x).storage()}};
  }

  nlohmann::json decode_request(const nlohmann::json& req) const {
    const Tensor y = vector_field(req, "y_hat", ck_->spec.target_dim);
    const Tensor z = vector_field(req, "z", ck_->spec.latent_dim);
    return image_json(decode(model_, y, z));
  }

  EditRequest edit_request(const nlohmann::json& req) const {
    EditRequest edit;
    edit.mode = ck_->spec.mode;
    if (edit.mode == LabelMode::multiclass) {
      auto it = req.find("target_class");
      if (it == req.end()) throw RequestError(400, "target_class", "missing");
      if (!it->is_number_unsigned()) throw RequestError(400, "target_class", "must be a non-negative integer");
      edit.target_class = it->get<std::size_t>();
      if (edit.target_class >= ck_->spec.target_dim) throw RequestError(400, "target_class", "out of range");
      return edit;
    }
    auto it = req.find("edits");
    if (it == req.end()) return edit;
    if (!it->is_array()) throw RequestError(400, "edits", "must be an array");
    std::set<std::size_t> seen;
    for (std::size_t i = 0; i < it->size(); ++i) {
      const auto& e = (*it)[i];
      const std::string where = "edits[" + std::to_string(i) + "]";
      if (!e.is_object()) throw RequestError(400, where, "must be an object");
      AttributeEdit out;
      if (auto a = e.find("attribute"); a != e.end()) {
        if (!a->is_string()) throw RequestError(400, where + ".attribute", "must be a string");
        const auto& names = ck_->label_names;
        auto pos = std::find(names.begin(), names.end(), a->get<std::string>());
        if (pos == names.end()) throw RequestError(400, where + ".attribute", "unknown attribute");
        out.index = static_cast<std::size_t>(pos - names.begin());
      } else if (auto idx = e.find("index"); idx != e.end()) {
        if (!idx->is_number_unsigned()) throw RequestError(400, where + ".index", "must be a non-negative integer");
        out.index = idx->get<std::size_t>();
        if (out.index >= ck_->spec.target_dim) throw RequestError(400, where + ".index", "out of range");
      } else {
        throw RequestError(400, where, "needs 'index' or 'attribute'");
      }
      auto v = e.find("value");
      if (v == e.end() || !v->is_number()) throw RequestError(400, where + ".value", "must be a number");
      out.value = v->get<double>();
      if (!seen.insert(out.index).second) throw RequestError(400, where, "attribute edited more than once");
      if (!ck_->config.edit_interval.contains(out.value)) {
        throw RequestError(422, where + ".value",
                           "outside the editing interval [" + std::to_string(ck_->config.edit_interval.lo) + ", " +
                               std::to_string(ck_->config.edit_interval.hi) + "]");
      }
      edit.edits.push_back(out);
    }
    return edit;
  }

  nlohmann::json edit(const nlohmann::json& req) const {
    const Tensor x = image(req);
    const Synthesis s = synthesize(model_, x, edit_request(req), ck_->config.edit_interval);
    nlohmann::json out = image_json(s.x_edit);
    out["y_hat"] = s.y_hat.storage();
    out["y_hat_edited"] = s.y_hat_edited.storage();
    out["z"] = s.z.storage();
    return out;
  }

  std::shared_ptr<const Checkpoint> ck_;
  Model model_;
};

/// Routes every endpoint of `service` on `server`.
inline void mount(httplib::Server& server, const InferenceService& service) {
  auto forward = [&service](const httplib::Request& req, httplib::Response& res) {
    const ServiceResponse r = service.handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server.Get("/model-info", forward);
  for (const char* path : {"/encode", "/edit", "/decode"}) {
    server.Post(path, forward);
    server.Get(path, forward);
  }
  server.Post("/model-info", forward);
}

}  // namespace cdnet
