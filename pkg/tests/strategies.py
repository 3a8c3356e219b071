from hypothesis import strategies as st

from constrained_kyle import ModelParams

sigmas = st.floats(0.2, 5.0)
rhos = st.floats(0.01, 1.0)
horizons = st.floats(0.1, 5.0)


@st.composite
def model_params(draw):
    return ModelParams(sigma_w=draw(sigmas), sigma_a=draw(sigmas), sigma_v=draw(sigmas),
                       rho=draw(rhos), T=draw(horizons))
