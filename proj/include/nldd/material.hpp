#ifndef NLDD_MATERIAL_HPP
#define NLDD_MATERIAL_HPP

#include <Eigen/Dense>
#include <stdexcept>

namespace nldd {

/// Small-strain plane-stress constitutive models.
/// Voigt convention throughout: (xx, yy, xy) with engineering shear strain.
enum class MaterialModel {
  LinearElastic,     ///< sigma = C eps
  J2PlaneStress,     ///< perfect plasticity, von Mises yield at sigma0
  StiffeningElastic  ///< smooth hyperelastic sigma = (1 + kappa q) C eps, q = eps^T C eps
};

struct Material {
  MaterialModel model = MaterialModel::J2PlaneStress;
  double E = 210000.0;  ///< Young modulus [MPa]
  double nu = 0.3;      ///< Poisson ratio
  double sigma0 = 420.0;///< yield stress [MPa]
  double kappa = 0.0;   ///< stiffening coefficient [1/MPa] (StiffeningElastic only)

  void validate() const {
    if (!(E > 0.0)) throw std::invalid_argument("material: E must be positive");
    if (!(nu >= 0.0 && nu < 0.5)) throw std::invalid_argument("material: nu must be in [0, 0.5)");
    if (!(sigma0 > 0.0)) throw std::invalid_argument("material: sigma0 must be positive");
  }

  /// Plane-stress elastic matrix.
  Eigen::Matrix3d elastic_matrix() const {
    Eigen::Matrix3d c = Eigen::Matrix3d::Zero();
    const double f = E / (1.0 - nu * nu);
    c(0, 0) = f;
    c(1, 1) = f;
    c(0, 1) = f * nu;
    c(1, 0) = f * nu;
    c(2, 2) = f * (1.0 - nu) / 2.0;
    return c;
  }
};

/// History at one Gauss point: plastic strain (Voigt, engineering shear) and
/// cumulated plasticity p.
struct GaussState {
  Eigen::Vector3d eps_p = Eigen::Vector3d::Zero();
  double p = 0.0;
};

}  // namespace nldd

#endif
